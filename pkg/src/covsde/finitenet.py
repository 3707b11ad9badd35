"""Finite-width forward simulators.

Two paths are provided.

* Explicit weights: ``attention_layer``, ``resnet_layer`` and
  ``transformer_block`` act on an m x n token matrix with full Gaussian weight
  matrices, exactly as in the layer definitions.
* Reduced chain: ``run_ensemble`` propagates the m x m covariance directly. The
  law of V_{l+1} given X_l depends on X_l only through V_l (the weights are
  rotation invariant), so each layer can be sampled with O(m^2) Gaussian draws
  for attention and O(m n) for the ReLU branch. The Pre-LN baseline is not
  rotation invariant and keeps the full token matrix.

All weights are standard normal; the 1/sqrt(n) factors are explicit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import parallel, symmat
from .coeffs import CoeffParams

VARIANTS = (
    "shaped_attention",
    "vanilla_softmax",
    "pre_ln",
    "resnet_relu",
    "shaped_transformer",
)
ATTENTION_VARIANTS = ("shaped_attention", "vanilla_softmax", "pre_ln", "shaped_transformer")
MLP_VARIANTS = ("resnet_relu", "shaped_transformer")


@dataclass(frozen=True)
class NetConfig:
    n: int = 200
    d: int = 150
    m: int = 2
    n_k: int | None = None  # defaults to n
    gamma: float = 1 / math.sqrt(8)
    lam: float | None = None  # defaults to sqrt(1 - gamma^2)
    tau0: float = 1.0
    c_plus: float = 0.0
    c_minus: float = -1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    variant: str = "shaped_attention"
    use_identity: bool = True
    use_centering: bool = True
    use_wide_temperature: bool = True
    enforce_branch_norm: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("n", "m"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d < 0:
            raise ValueError("d must be >= 0")
        if self.n_k is None:
            object.__setattr__(self, "n_k", self.n)
        if self.n_k < 1:
            raise ValueError("n_k must be >= 1")
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        if self.lam is None:
            if not 0 <= self.gamma <= 1:
                raise ValueError("gamma must lie in [0, 1] when lam is derived")
            object.__setattr__(self, "lam", math.sqrt(1.0 - self.gamma**2))
        elif self.enforce_branch_norm and abs(self.lam**2 + self.gamma**2 - 1) > 1e-12:
            raise ValueError("lam^2 + gamma^2 must equal 1 when enforce_branch_norm is set")

    @property
    def tau(self) -> float:
        """Softmax temperature of the shaped attention."""
        if self.use_wide_temperature:
            return self.tau0 * math.sqrt(self.n * self.n_k)
        return math.sqrt(self.n_k)

    def coeff_params(self) -> CoeffParams:
        return CoeffParams(
            gamma=self.gamma, tau0=self.tau0, c_plus=self.c_plus, c_minus=self.c_minus, m=self.m
        )

    def with_(self, **changes) -> "NetConfig":
        if "gamma" in changes and "lam" not in changes:
            changes["lam"] = None
        return replace(self, **changes)


@dataclass
class LayerWeights:
    """Standard-normal weights of one block; unused entries are None."""

    WQ: np.ndarray | None = None
    WK: np.ndarray | None = None
    WV: np.ndarray | None = None
    Wpre: np.ndarray | None = None
    Wpost: np.ndarray | None = None

    @classmethod
    def draw(cls, rng: np.random.Generator, config: NetConfig) -> "LayerWeights":
        # fixed order: W^Q, W^K, W^V, then W^pre, W^post
        n, nk = config.n, config.n_k
        w = cls()
        if config.variant in ATTENTION_VARIANTS:
            w.WQ = rng.standard_normal((n, nk))
            w.WK = rng.standard_normal((n, nk))
            w.WV = rng.standard_normal((n, n))
        if config.variant in MLP_VARIANTS:
            w.Wpre = rng.standard_normal((n, n))
            w.Wpost = rng.standard_normal((n, n))
        return w


# ---------------------------------------------------------------------------
# building blocks


def shaped_relu(x, c_plus: float, c_minus: float, n: int):
    """Leaky ReLU with slopes s = 1 + c / sqrt(n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=float)
    sp = 1.0 + c_plus / math.sqrt(n)
    sm = 1.0 + c_minus / math.sqrt(n)
    out = np.where(x > 0, sp * x, sm * x)
    return out if out.ndim else float(out)


def he_constant(c_plus: float, c_minus: float, n: int) -> float:
    """c with 1/c = E[shaped_relu(g)^2] = (s+^2 + s-^2) / 2 for g ~ N(0, 1)."""
    sp = 1.0 + c_plus / math.sqrt(n)
    sm = 1.0 + c_minus / math.sqrt(n)
    return 2.0 / (sp * sp + sm * sm)


def attention_logits(X, WQ, WK, n: int | None = None):
    X = np.asarray(X, dtype=float)
    if n is None:
        n = X.shape[-1]
    if X.shape[-1] != np.shape(WQ)[-2] or np.shape(WQ) != np.shape(WK):
        raise ValueError(
            f"shape mismatch: X {X.shape}, W^Q {np.shape(WQ)}, W^K {np.shape(WK)}"
        )
    Q = X @ WQ
    K = X @ WK
    return Q @ np.swapaxes(K, -1, -2) / n


def softmax_rows(Y):
    Y = np.asarray(Y, dtype=float)
    Z = np.exp(Y - Y.max(axis=-1, keepdims=True))
    return Z / Z.sum(axis=-1, keepdims=True)


def shaped_attention_matrix(
    Y,
    tau0: float,
    n: int,
    n_k: int,
    gamma1: float = 1.0,
    gamma2: float = 1.0,
    use_identity: bool = True,
    use_centering: bool = True,
    use_wide_temperature: bool = True,
):
    """gamma1 I + Softmax(Y / tau) - gamma2 11^T / m with tau = tau0 sqrt(n n_k).

    Each toggle switches one modification off: the identity, the centering, or
    the wide temperature (replaced by tau = sqrt(n_k)).
    """
    Y = np.asarray(Y, dtype=float)
    m = Y.shape[-1]
    tau = tau0 * math.sqrt(n * n_k) if use_wide_temperature else math.sqrt(n_k)
    A = softmax_rows(Y / tau)
    if use_identity:
        A = A + gamma1 * np.eye(m)
    if use_centering:
        A = A - gamma2 / m
    return A


def vanilla_attention_matrix(Y, n_k: int):
    return softmax_rows(np.asarray(Y, dtype=float) / math.sqrt(n_k))


def attention_matrix(Y, config: NetConfig):
    if config.variant in ("vanilla_softmax", "pre_ln"):
        return vanilla_attention_matrix(Y, config.n_k)
    return shaped_attention_matrix(
        Y,
        config.tau0,
        config.n,
        config.n_k,
        config.gamma1,
        config.gamma2,
        config.use_identity,
        config.use_centering,
        config.use_wide_temperature,
    )


def layer_norm(X):
    """Per-token normalization over features, no affine parameters."""
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=-1, keepdims=True)
    Xc = X - mu
    sd = np.sqrt(np.mean(Xc * Xc, axis=-1, keepdims=True))
    return np.divide(Xc, sd, out=np.zeros_like(Xc), where=sd > 0)


def attention_layer(X, weights: LayerWeights, config: NetConfig):
    """X' = lam X + gamma A U W^V / sqrt(n), with U = LN(X) for Pre-LN, else X."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != config.n or X.shape[-2] != config.m:
        raise ValueError(f"expected tokens of shape ({config.m}, {config.n}), got {X.shape}")
    U = layer_norm(X) if config.variant == "pre_ln" else X
    Y = attention_logits(U, weights.WQ, weights.WK, config.n)
    A = attention_matrix(Y, config)
    return config.lam * X + config.gamma * (A @ U @ weights.WV) / math.sqrt(config.n)


def resnet_layer(X, weights: LayerWeights, config: NetConfig):
    """X' = lam X + gamma sqrt(c/n) relu_s(X W^pre / sqrt(n)) W^post."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != config.n or X.shape[-2] != config.m:
        raise ValueError(f"expected tokens of shape ({config.m}, {config.n}), got {X.shape}")
    n = config.n
    c = he_constant(config.c_plus, config.c_minus, n)
    H = shaped_relu(X @ weights.Wpre / math.sqrt(n), config.c_plus, config.c_minus, n)
    return config.lam * X + config.gamma * math.sqrt(c / n) * (H @ weights.Wpost)


def transformer_block(X, weights: LayerWeights, config: NetConfig):
    return resnet_layer(attention_layer(X, weights, config), weights, config)


def apply_block(X, weights: LayerWeights, config: NetConfig):
    if config.variant == "resnet_relu":
        return resnet_layer(X, weights, config)
    if config.variant == "shaped_transformer":
        return transformer_block(X, weights, config)
    return attention_layer(X, weights, config)


def build_inputs(V0, m: int, n: int, seed=None):
    """Token matrix X0 (m x n) with X0 X0^T / n = V0.

    X0 = sqrt(n) V0^{1/2} E^T, E an n x m random orthonormal frame.
    """
    V0 = np.asarray(V0, dtype=float)
    if V0.shape != (m, m):
        raise ValueError(f"V0 must be {m} x {m}, got {V0.shape}")
    if m > n:
        raise ValueError(f"need m <= n, got m={m}, n={n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    F = symmat.psd_sqrt(V0)
    Q, R = np.linalg.qr(rng.standard_normal((n, m)))
    Q = Q * np.sign(np.diagonal(R))
    return math.sqrt(n) * F @ Q.T


def forward_explicit(config: NetConfig, V0, seed=None, X0=None):
    """Explicit-weight forward pass; returns flattened V for layers 0..d."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = build_inputs(V0, config.m, config.n, rng) if X0 is None else np.asarray(X0, float)
    out = [symmat.flatten(symmat.covariance_of(X))]
    for _ in range(config.d):
        X = apply_block(X, LayerWeights.draw(rng, config), config)
        out.append(symmat.flatten(symmat.covariance_of(X)))
    return np.array(out)


# ---------------------------------------------------------------------------
# reduced chain


def _wishart(rng, batch, m, dof):
    """Batch of Wishart_m(dof, I) matrices (Bartlett factor when dof >= m)."""
    if dof <= 0:
        return np.zeros((batch, m, m))
    return _outer(_gram_factor(rng, batch, m, dof))


def _gram_factor(rng, batch, m, dof):
    """L with L L^T distributed as G G^T for G an m x dof standard Gaussian."""
    if dof < m:
        return rng.standard_normal((batch, m, dof))
    L = np.tril(rng.standard_normal((batch, m, m)), -1)
    idx = np.arange(m)
    L[:, idx, idx] = np.sqrt(rng.chisquare(dof - idx, size=(batch, m)))
    return L


def _outer(L):
    return L @ np.swapaxes(L, -1, -2)


def _sqrt(V):
    # Gram matrices are PSD up to round-off; overflowed samples come back NaN
    ok = np.all(np.isfinite(V), axis=(-2, -1))
    S, _ = symmat.psd_sqrt_masked(np.where(ok[..., None, None], V, np.eye(V.shape[-1])), tol=np.inf)
    S[~ok] = np.nan
    return S


def _chain_logits(rng, F, n_k):
    """Y = F G_q G_k^T F^T in law, from m x m Gaussian and a Gram factor."""
    batch, m, _ = F.shape
    if n_k >= m:
        P = rng.standard_normal((batch, m, m)) @ np.swapaxes(_gram_factor(rng, batch, m, n_k), -1, -2)
    else:
        P = rng.standard_normal((batch, m, n_k)) @ np.swapaxes(rng.standard_normal((batch, m, n_k)), -1, -2)
    return F @ P @ np.swapaxes(F, -1, -2)


def _residual_update(rng, V, F, Fb, lam, scale, n):
    """Covariance of lam X + scale * Fb G, X = sqrt(n) F E^T, G iid m x n."""
    batch, m, _ = V.shape
    Z1 = rng.standard_normal((batch, m, m))
    W = Z1 @ np.swapaxes(Z1, -1, -2) + _wishart(rng, batch, m, n - m)
    cross = (lam * scale / math.sqrt(n)) * (F @ np.swapaxes(Z1, -1, -2) @ np.swapaxes(Fb, -1, -2))
    out = lam * lam * V + cross + np.swapaxes(cross, -1, -2)
    out = out + (scale * scale / n) * (Fb @ W @ np.swapaxes(Fb, -1, -2))
    return symmat.symmetrize(out)


def _chain_attention(rng, V, config):
    F = _sqrt(V)
    A = attention_matrix(_chain_logits(rng, F, config.n_k), config)
    return _residual_update(rng, V, F, A @ F, config.lam, config.gamma, config.n)


def _chain_relu(rng, V, config):
    n = config.n
    batch, m, _ = V.shape
    F = _sqrt(V)
    H = shaped_relu(F @ rng.standard_normal((batch, m, n)), config.c_plus, config.c_minus, n)
    Fh = _sqrt(_outer(H) / n)
    c = he_constant(config.c_plus, config.c_minus, n)
    return _residual_update(rng, V, F, Fh, config.lam, config.gamma * math.sqrt(c), n)


def _chain_pre_ln(rng, X, config):
    batch, m, n = X.shape
    U = layer_norm(X)
    Fu = _sqrt(_outer(U) / n)
    A = vanilla_attention_matrix(_chain_logits(rng, Fu, config.n_k), config.n_k)
    G = rng.standard_normal((batch, m, n))
    return config.lam * X + config.gamma * (A @ Fu @ G)


def chain_step(rng, V, config: NetConfig):
    """One block of the reduced chain on a batch of covariances (batch, m, m)."""
    if config.variant in ("shaped_attention", "vanilla_softmax"):
        return _chain_attention(rng, V, config)
    if config.variant == "resnet_relu":
        return _chain_relu(rng, V, config)
    if config.variant == "shaped_transformer":
        return _chain_relu(rng, _chain_attention(rng, V, config), config)
    raise ValueError(f"variant {config.variant!r} has no covariance-only chain")


@dataclass
class NetEnsemble:
    """Per-layer flattened covariances of an ensemble of networks.

    ``trajectories`` has shape (samples, d + 1, M) when recorded, else
    (samples, 1, M) holding the terminal state. Samples whose activations
    overflow are NaN from ``nonfinite_layer`` on (-1 when always finite).
    """

    config: NetConfig
    seed: int
    trajectories: np.ndarray
    nonfinite_layer: np.ndarray
    recorded: bool = True
    V0: np.ndarray = field(default=None, repr=False)

    @property
    def samples(self) -> int:
        return self.trajectories.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.trajectories[:, -1, :]


def _run_block(config: NetConfig, V0, count: int, seed: int, block: int, record: bool):
    rng = parallel.block_rng(seed, block, parallel.STREAM_NET)
    m, n = config.m, config.n
    V0 = np.asarray(V0, dtype=float)
    dead = np.full(count, -1, dtype=np.int64)
    full_state = config.variant == "pre_ln"
    if full_state:
        X = np.stack([build_inputs(V0, m, n, rng) for _ in range(count)])
        V = symmat.covariance_of(X)
    else:
        V = np.broadcast_to(V0, (count, m, m)).copy()
    traj = [symmat.flatten(V)] if record else None
    eye = np.eye(m)
    with np.errstate(all="ignore"):
        for layer in range(1, config.d + 1):
            alive = dead < 0
            if full_state:
                Xs = np.where(alive[:, None, None], X, 0.0)
                X = _chain_pre_ln(rng, Xs, config)
                V = symmat.symmetrize(X @ np.swapaxes(X, -1, -2) / n)
            else:
                Vs = np.where(alive[:, None, None], V, eye)
                V = chain_step(rng, Vs, config)
            bad = alive & ~np.all(np.isfinite(V), axis=(-2, -1))
            dead[bad] = layer
            V[dead >= 0] = np.nan
            if record:
                traj.append(symmat.flatten(V))
    out = np.stack(traj, axis=1) if record else symmat.flatten(V)[:, None, :]
    return out, dead


def run_ensemble(
    config: NetConfig, V0, samples: int, seed: int = 0, record: bool = True, workers=None
) -> NetEnsemble:
    """Simulate ``samples`` independent networks with the reduced chain."""
    V0 = np.asarray(V0, dtype=float)
    if V0.shape != (config.m, config.m):
        raise ValueError(f"V0 must be {config.m} x {config.m}")
    symmat.psd_sqrt(V0)  # rejects indefinite inputs
    jobs = [
        (config, V0, size, seed, k, record)
        for k, size in enumerate(parallel.block_sizes(samples))
    ]
    parts = parallel.map_blocks(_run_block, jobs, workers)
    return NetEnsemble(
        config=config,
        seed=seed,
        trajectories=np.concatenate([p[0] for p in parts]),
        nonfinite_layer=np.concatenate([p[1] for p in parts]),
        recorded=record,
        V0=V0,
    )


def forward_network(config: NetConfig, V0, seed: int = 0, method: str = "chain"):
    """Flattened covariance trajectory {V_l}, l = 0..d, of one network.

    ``method="explicit"`` draws full weight matrices every layer; ``"chain"``
    uses the reduced covariance chain (same law, far cheaper).
    """
    if method == "explicit":
        return forward_explicit(config, V0, parallel.block_rng(seed, 0, parallel.STREAM_NET))
    if method != "chain":
        raise ValueError(f"unknown method {method!r}")
    return run_ensemble(config, V0, 1, seed, workers=1).trajectories[0]
