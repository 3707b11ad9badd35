"""Closed-form drift and diffusion of the limiting covariance SDEs.

Three architectures are covered:

* residual shaped-ReLU MLP:   b_res = gamma^2 b_relu,  Sigma_res = 2 gamma^2 Sigma_lin
* residual shaped attention:  b_attn, Sigma_attn = gamma^2 (2 - gamma^2) Sigma_lin
                              + gamma^4 / tau0^2 * A
* shaped Transformer block:   the sum of the two.

Drift vectors and diffusion matrices live in flattened coordinates (see
:mod:`covsde.symmat`). The scalar functions ``s1``, ``s2`` and ``a_tensor``
evaluate single entries with explicit sums and serve as references for the
batched tensor forms used by the integrator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import symmat
from .symmat import DEFAULT_PSD_TOL, flatten, index_map


@dataclass(frozen=True)
class CoeffParams:
    gamma: float = 1.0
    tau0: float = 1.0
    c_plus: float = 0.0
    c_minus: float = -1.0
    m: int = 2

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.tau0 <= 0:
            raise ValueError(f"tau0 must be positive, got {self.tau0}")
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def lam(self) -> float:
        return math.sqrt(1.0 - self.gamma**2)


@dataclass(frozen=True)
class DriftDiffusion:
    drift: np.ndarray
    diffusion: np.ndarray

    def __add__(self, other: "DriftDiffusion") -> "DriftDiffusion":
        return DriftDiffusion(self.drift + other.drift, self.diffusion + other.diffusion)


# ---------------------------------------------------------------------------
# residual shaped-ReLU network


def nu(rho, c_plus: float, c_minus: float):
    """Nonlinear correction of the shaped-ReLU kernel.

    nu(rho) = (c+ - c-)^2 / (2 pi) * (sqrt(1 - rho^2) - rho * arccos(rho))
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(np.abs(rho) > 1 + 1e-12):
        raise ValueError("nu requires |rho| <= 1")
    rho = np.clip(rho, -1.0, 1.0)
    k = (c_plus - c_minus) ** 2 / (2 * np.pi)
    out = k * (np.sqrt(1.0 - rho * rho) - rho * np.arccos(rho))
    return out if out.ndim else float(out)


def _matrix_b_relu(V, c_plus, c_minus):
    V = np.asarray(V, dtype=float)
    d = np.diagonal(V, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise ValueError("b_relu requires a strictly positive diagonal")
    scale = np.sqrt(d[..., :, None] * d[..., None, :])
    rho = np.clip(V / scale, -1.0, 1.0)
    B = nu(rho, c_plus, c_minus) * scale
    # nu(1) = 0 exactly; avoid arccos round-off at the boundary
    idx = np.arange(V.shape[-1])
    B[..., idx, idx] = 0.0
    return B


def b_relu(V, c_plus: float, c_minus: float) -> np.ndarray:
    """Entries nu(rho^{ab}) sqrt(V^{aa} V^{bb}), flattened."""
    return flatten(_matrix_b_relu(V, c_plus, c_minus))


def sigma_lin(V) -> np.ndarray:
    """[V^{ad} V^{bw} + V^{aw} V^{bd}] indexed by flat pairs (a<=b), (d<=w)."""
    V = np.asarray(V, dtype=float)
    imap = index_map(V.shape[-1])
    a, b = imap.rows[:, None], imap.cols[:, None]
    d, w = imap.rows[None, :], imap.cols[None, :]
    S = V[..., a, d] * V[..., b, w] + V[..., a, w] * V[..., b, d]
    return symmat.symmetrize(S)


def resnet_coeffs(V, params: CoeffParams) -> DriftDiffusion:
    g2 = params.gamma**2
    return DriftDiffusion(
        g2 * b_relu(V, params.c_plus, params.c_minus),
        2.0 * g2 * sigma_lin(V),
    )


# ---------------------------------------------------------------------------
# residual shaped attention


def _token_means(V):
    V = np.asarray(V, dtype=float)
    vx = V.mean(axis=-1)  # V^{a xbar}
    vxx = vx.mean(axis=-1)  # V^{xbar xbar}
    vbar = np.trace(V, axis1=-2, axis2=-1) / V.shape[-1]
    return vx, vxx, vbar


def _check_index(m, *idx):
    for i in idx:
        if not 0 <= i < m:
            raise IndexError(f"token index {i} out of range for m={m}")


def s1(V, a: int, d: int, b: int, w: int) -> float:
    """S1^{ad,bw} = V^{ab} (V^{dw} - V^{d xbar} - V^{w xbar} + V^{xbar xbar})."""
    V = np.asarray(V, dtype=float)
    m = V.shape[-1]
    _check_index(m, a, d, b, w)
    vx, vxx, _ = _token_means(V)
    return float(V[a, b] * (V[d, w] - vx[d] - vx[w] + vxx))


def s2(V, a: int, d: int) -> float:
    """S2^{ad} = V^{aa} (V^{dd} - 2 V^{d xbar} + 2 V^{xbar xbar} - Vbar)."""
    V = np.asarray(V, dtype=float)
    m = V.shape[-1]
    _check_index(m, a, d)
    vx, vxx, vbar = _token_means(V)
    return float(V[a, a] * (V[d, d] - 2 * vx[d] + 2 * vxx - vbar))


def _centered(V):
    """C^{dw} = V^{dw} - V^{d xbar} - V^{w xbar} + V^{xbar xbar}, i.e. H V H."""
    vx, vxx, _ = _token_means(V)
    return V - vx[..., :, None] - vx[..., None, :] + vxx[..., None, None]


def _s2_matrix(V):
    vx, vxx, vbar = _token_means(V)
    d = np.diagonal(V, axis1=-2, axis2=-1)
    inner = d - 2 * vx + (2 * vxx - vbar)[..., None]
    return d[..., :, None] * inner[..., None, :]


def _matrix_b_attn(V, gamma, tau0):
    V = np.asarray(V, dtype=float)
    m = V.shape[-1]
    C = _centered(V)
    # (1/m^2) sum_{nu,kappa} V^{nu kappa} S1^{a nu, b kappa} = V^{ab} <V, C> / m^2
    first = V * (np.sum(V * C, axis=(-2, -1)) / m**2)[..., None, None]
    S2V = _s2_matrix(V) @ V
    second = (S2V + np.swapaxes(S2V, -1, -2)) / (2 * m)
    return gamma**2 / tau0**2 * (first + second)


def b_attn(V, params: CoeffParams) -> np.ndarray:
    """Shaped-attention drift, flattened."""
    V = np.asarray(V, dtype=float)
    d = np.diagonal(V, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise ValueError("b_attn requires a strictly positive diagonal")
    return flatten(_matrix_b_attn(V, params.gamma, params.tau0))


def a_tensor(V, a: int, b: int, d: int, w: int) -> float:
    """Single entry of the attention diffusion correction, by explicit summation."""
    V = np.asarray(V, dtype=float)
    m = V.shape[-1]
    _check_index(m, a, b, d, w)
    total = 0.0
    for nu_ in range(m):
        for ka in range(m):
            total += V[a, ka] * V[d, nu_] * s1(V, b, ka, w, nu_)
            total += V[a, ka] * V[w, nu_] * s1(V, b, ka, d, nu_)
            total += V[b, nu_] * V[d, ka] * s1(V, a, nu_, w, ka)
            total += V[b, nu_] * V[w, ka] * s1(V, a, nu_, d, ka)
    return total / m**2


def a_matrix(V) -> np.ndarray:
    """The attention correction as an M x M matrix over flat pairs.

    With D = V C V / m^2 (C the token-centred covariance) the four-term sum
    collapses to D^{ad} V^{bw} + D^{aw} V^{bd} + D^{bd} V^{aw} + D^{bw} V^{ad}.
    """
    V = np.asarray(V, dtype=float)
    m = V.shape[-1]
    D = V @ _centered(V) @ V / m**2
    imap = index_map(m)
    a, b = imap.rows[:, None], imap.cols[:, None]
    d, w = imap.rows[None, :], imap.cols[None, :]
    A = (
        D[..., a, d] * V[..., b, w]
        + D[..., a, w] * V[..., b, d]
        + D[..., b, d] * V[..., a, w]
        + D[..., b, w] * V[..., a, d]
    )
    return symmat.symmetrize(A)


def _assert_psd(S, tol):
    if S.ndim == 2:
        w = symmat.eigvalsh(S)
        if w[-1] < -tol * max(1.0, w[0]):
            raise symmat.IndefiniteMatrixError(w[-1], max(1.0, w[0]), tol)


def sigma_attn(V, params: CoeffParams, check: bool = True, tol: float = DEFAULT_PSD_TOL):
    """gamma^2 (2 - gamma^2) Sigma_lin + gamma^4 / tau0^2 * A, symmetrized."""
    g2 = params.gamma**2
    S = g2 * (2 - g2) * sigma_lin(V) + g2 * g2 / params.tau0**2 * a_matrix(V)
    if check:
        _assert_psd(S, tol)
    return S


def attention_coeffs(V, params: CoeffParams, check: bool = False) -> DriftDiffusion:
    return DriftDiffusion(b_attn(V, params), sigma_attn(V, params, check=check))


def transformer_coeffs(V, params: CoeffParams, check: bool = True) -> DriftDiffusion:
    """Shaped Transformer block: attention plus residual-MLP coefficients."""
    out = attention_coeffs(V, params) + resnet_coeffs(V, params)
    if check:
        _assert_psd(out.diffusion, DEFAULT_PSD_TOL)
    return out


COEFFICIENTS = {
    "resnet": resnet_coeffs,
    "attention": attention_coeffs,
    "transformer": lambda V, p: transformer_coeffs(V, p, check=False),
}


def coefficients(kind: str, V, params: CoeffParams) -> DriftDiffusion:
    try:
        fn = COEFFICIENTS[kind]
    except KeyError:
        raise ValueError(f"unknown coefficient selector {kind!r}") from None
    return fn(V, params)
