"""Dense symmetric-matrix kernel.

Token covariances are small (m <= ~8) and their flattened diffusion matrices are
at most m(m+1)/2 = 36 square, so everything here favours robustness over speed.
Most functions accept a leading batch of matrices, shape ``(..., k, k)``.

Flattening convention: row-major over the upper triangle, i.e. for m = 3 the
order is (0,0), (0,1), (0,2), (1,1), (1,2), (2,2).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_PSD_TOL = 1e-8


class IndefiniteMatrixError(ValueError):
    """A matrix expected to be PSD has an eigenvalue below tolerance."""

    def __init__(self, min_eig, scale, tol):
        self.min_eig = float(min_eig)
        self.scale = float(scale)
        self.tol = tol
        super().__init__(
            f"matrix is indefinite: min eigenvalue {self.min_eig:.3e} "
            f"< -{tol:g} * {self.scale:.3e}"
        )


def flat_dim(m: int) -> int:
    return m * (m + 1) // 2


def dim_from_flat(size: int) -> int:
    m = int(round((np.sqrt(8 * size + 1) - 1) / 2))
    if flat_dim(m) != size:
        raise ValueError(f"length {size} is not a triangular number m(m+1)/2")
    return m


@dataclass(frozen=True)
class FlatIndexMap:
    """Bijection between pairs (a, b), a <= b, and flat indices 0..M-1."""

    m: int
    rows: np.ndarray = field(init=False, repr=False, compare=False)
    cols: np.ndarray = field(init=False, repr=False, compare=False)
    lookup: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        rows, cols = np.triu_indices(self.m)
        lookup = np.full((self.m, self.m), -1, dtype=np.intp)
        lookup[rows, cols] = np.arange(rows.size)
        lookup[cols, rows] = np.arange(rows.size)
        for name, arr in (("rows", rows), ("cols", cols), ("lookup", lookup)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return flat_dim(self.m)

    def forward(self, a: int, b: int) -> int:
        if not (0 <= a < self.m and 0 <= b < self.m):
            raise IndexError(f"pair ({a}, {b}) out of range for m={self.m}")
        if a > b:
            raise ValueError("forward map expects a <= b")
        return int(self.lookup[a, b])

    def inverse(self, k: int) -> tuple[int, int]:
        if not 0 <= k < self.size:
            raise IndexError(f"flat index {k} out of range [0, {self.size})")
        return int(self.rows[k]), int(self.cols[k])

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(a), int(b)) for a, b in zip(self.rows, self.cols)]


@lru_cache(maxsize=None)
def index_map(m: int) -> FlatIndexMap:
    """Shared FlatIndexMap instance for token count m."""
    return FlatIndexMap(m)


def flatten(V) -> np.ndarray:
    """Upper-triangular entries of V (or of each matrix in a batch)."""
    V = np.asarray(V, dtype=float)
    if V.ndim < 2 or V.shape[-1] != V.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {V.shape}")
    imap = index_map(V.shape[-1])
    return V[..., imap.rows, imap.cols]


def unflatten(v, m: int | None = None) -> np.ndarray:
    """Inverse of :func:`flatten`; the result is exactly symmetric."""
    v = np.asarray(v, dtype=float)
    if v.ndim < 1:
        raise ValueError("expected a vector")
    if m is None:
        m = dim_from_flat(v.shape[-1])
    elif v.shape[-1] != flat_dim(m):
        raise ValueError(
            f"vector length {v.shape[-1]} does not match m={m} (need {flat_dim(m)})"
        )
    imap = index_map(m)
    V = np.empty(v.shape[:-1] + (m, m))
    V[..., imap.rows, imap.cols] = v
    V[..., imap.cols, imap.rows] = v
    return V


def symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _jacobi(A, tol=1e-15, max_sweeps=60):
    """Cyclic Jacobi on a batch of symmetric matrices; returns (diag, Q)."""
    A = np.array(A, dtype=float)
    k = A.shape[-1]
    batch = A.shape[:-2]
    A = A.reshape((-1, k, k))
    Q = np.broadcast_to(np.eye(k), A.shape).copy()
    if k == 1:
        return A[:, 0, :].reshape(batch + (1,)), Q.reshape(batch + (1, 1))
    iu = np.triu_indices(k, 1)
    scale = np.sqrt(np.sum(A * A, axis=(1, 2)))
    scale[scale == 0] = 1.0
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A[:, iu[0], iu[1]] ** 2, axis=1))
        if np.all(off <= tol * scale):
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = A[:, p, q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(1.0, theta))
                t[theta == 0] = 1.0
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                c_ = c[:, None]
                s_ = s[:, None]
                # A <- J^T A J with J the (p, q) plane rotation
                ap = A[:, :, p].copy()
                aq = A[:, :, q]
                A[:, :, p] = c_ * ap - s_ * aq
                A[:, :, q] = s_ * ap + c_ * aq
                ap = A[:, p, :].copy()
                aq = A[:, q, :]
                A[:, p, :] = c_ * ap - s_ * aq
                A[:, q, :] = s_ * ap + c_ * aq
                A[:, p, q] = 0.0
                A[:, q, p] = 0.0
                qp = Q[:, :, p].copy()
                qq = Q[:, :, q]
                Q[:, :, p] = c_ * qp - s_ * qq
                Q[:, :, q] = s_ * qp + c_ * qq
    w = np.diagonal(A, axis1=1, axis2=2).copy()
    return w.reshape(batch + (k,)), Q.reshape(batch + (k, k))


def sym_eigen(A) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of symmetric matrices by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and orthonormal eigenvectors as
    columns, so that ``A = Q @ diag(w) @ Q.T``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("sym_eigen: non-finite input")
    w, Q = _jacobi(symmetrize(A))
    order = np.argsort(-w, axis=-1)
    w = np.take_along_axis(w, order, axis=-1)
    Q = np.take_along_axis(Q, order[..., None, :], axis=-1)
    return w, Q


def eigvalsh(A) -> np.ndarray:
    """Descending eigenvalues only."""
    return sym_eigen(A)[0]


def _check_psd(w, tol):
    # w is descending, so w[..., 0] is the max and w[..., -1] the min
    scale = np.maximum(1.0, w[..., 0])
    bad = w[..., -1] < -tol * scale
    return bad, scale


def psd_sqrt(A, tol: float = DEFAULT_PSD_TOL) -> np.ndarray:
    """Symmetric PSD square root S with S @ S = A (negative eigenvalues clipped).

    Eigenvalues down to ``-tol * max(1, max eigenvalue)`` are treated as
    round-off and clipped to zero; anything more negative raises
    :class:`IndefiniteMatrixError`.
    """
    S, bad = psd_sqrt_masked(A, tol)
    if np.any(bad):
        w = eigvalsh(A)
        idx = np.unravel_index(np.argmax(bad), bad.shape) if bad.ndim else ()
        raise IndefiniteMatrixError(w[idx][-1], max(1.0, w[idx][0]), tol)
    return S


def psd_sqrt_masked(A, tol: float = DEFAULT_PSD_TOL):
    """Batched :func:`psd_sqrt` that flags indefinite matrices instead of raising.

    Returns ``(S, bad)``; rows where ``bad`` is True contain the square root of
    the clipped matrix and should be treated as failures by the caller.
    """
    w, Q = sym_eigen(A)
    bad, _ = _check_psd(w, tol)
    root = np.sqrt(np.clip(w, 0.0, None))
    S = (Q * root[..., None, :]) @ np.swapaxes(Q, -1, -2)
    return symmetrize(S), bad


def clip_psd(A) -> np.ndarray:
    """Project onto the PSD cone by zeroing negative eigenvalues."""
    w, Q = sym_eigen(A)
    return symmetrize((Q * np.clip(w, 0.0, None)[..., None, :]) @ np.swapaxes(Q, -1, -2))


def correlation(V) -> np.ndarray:
    """rho^{ab} = V^{ab} / sqrt(V^{aa} V^{bb})."""
    V = np.asarray(V, dtype=float)
    d = np.diagonal(V, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise ValueError("correlation requires a strictly positive diagonal")
    s = 1.0 / np.sqrt(d)
    R = V * s[..., :, None] * s[..., None, :]
    R = np.clip(R, -1.0, 1.0)
    idx = np.arange(V.shape[-1])
    R[..., idx, idx] = 1.0
    return R


def covariance_of(X, n: int | None = None) -> np.ndarray:
    """Token covariance V = X X^T / n for an m x n token matrix."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("covariance_of: non-finite input")
    if n is None:
        n = X.shape[-1]
    V = X @ np.swapaxes(X, -1, -2) / n
    return symmetrize(V)
