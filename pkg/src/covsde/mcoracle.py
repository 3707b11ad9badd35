"""Brute-force Monte Carlo estimators for the closed-form moments.

Every estimator draws plain Gaussian weights in the canonical frame
X = sqrt(n) F [I_m, 0] with F F^T = V, where only the first m rows of each
weight matrix enter the computation. Output-side products such as
H W / sqrt(n) are drawn from their exact conditional law (rows Gaussian with
covariance H H^T / n), which keeps every sample O(m n).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import coeffs, parallel, symmat
from .finitenet import NetConfig, attention_matrix, he_constant, shaped_relu

CHUNK = 4096
# Absolute slack for estimates whose exact value is reached up to cancellation
# error (e.g. n (c K1(1) - 1) at n = 1e6 is 0 up to ~1e-10).
ROUNDOFF_ATOL = 1e-8

# Generic 3-token covariance used by the default suite.
REFERENCE_V3 = np.array([[1.0, 0.3, -0.2], [0.3, 0.8, 0.1], [-0.2, 0.1, 1.2]])
REFERENCE_V2 = np.array([[1.0, 0.2], [0.2, 1.0]])


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    std_error: float
    samples: int

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("need at least two samples")
        if self.std_error < 0:
            raise ValueError("std_error must be nonnegative")

    def z(self, expected: float) -> float:
        diff = self.mean - expected
        if self.std_error == 0:
            return 0.0 if diff == 0 else math.copysign(math.inf, diff)
        return diff / self.std_error

    def agrees(self, expected: float, bands: float = 4.0, atol: float = ROUNDOFF_ATOL) -> bool:
        """|mean - expected| within ``bands`` standard errors plus a round-off floor."""
        return abs(self.mean - expected) <= bands * self.std_error + atol


def _estimate(values) -> MomentEstimate:
    v = np.asarray(values, dtype=float).ravel()
    return MomentEstimate(float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(v.size)), v.size)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return parallel.block_rng(seed, 0, parallel.STREAM_ORACLE)


def _chunks(samples):
    while samples > 0:
        k = min(CHUNK, samples)
        yield k
        samples -= k


def _factor(V):
    return symmat.psd_sqrt(np.asarray(V, dtype=float))


def _logits(rng, F, n_k, k):
    """Y = X W^Q W^{K,T} X^T / n in the canonical frame, k draws."""
    m = F.shape[0]
    Q = F @ rng.standard_normal((k, m, n_k))
    K = F @ rng.standard_normal((k, m, n_k))
    return Q @ np.swapaxes(K, -1, -2)


def estimate_y_moment(V, a, b, d=None, w=None, n=400, n_k=16, samples=100_000, seed=0):
    """E[Y^{ab}] or E[Y^{ab} Y^{dw}] over fresh query/key weights."""
    V = np.asarray(V, dtype=float)
    if V.shape[0] > n:
        raise ValueError("need m <= n")
    rng = _rng(seed)
    F = _factor(V)
    vals = []
    for k in _chunks(samples):
        Y = _logits(rng, F, n_k, k)
        vals.append(Y[:, a, b] if d is None else Y[:, a, b] * Y[:, d, w])
    return _estimate(np.concatenate(vals))


@dataclass
class TaylorMoments:
    s1: dict  # (a, d, b, w) -> MomentEstimate
    s2: dict  # (a, d) -> MomentEstimate


def estimate_taylor_moments(V, n=400, n_k=64, samples=100_000, seed=0) -> TaylorMoments:
    """Estimates of S1 = E[F1^{ad} F1^{bw}] / n_k and S2 = E[F2^{ad}] / n_k."""
    V = np.asarray(V, dtype=float)
    m = V.shape[0]
    if m > n:
        raise ValueError("need m <= n")
    rng = _rng(seed)
    F = _factor(V)
    f1_parts, f2_parts = [], []
    for k in _chunks(samples):
        Y = _logits(rng, F, n_k, k)
        ybar = Y.mean(axis=-1, keepdims=True)
        F1 = Y - ybar
        spread = np.mean(Y * Y, axis=-1, keepdims=True) - ybar**2
        f1_parts.append(F1)
        f2_parts.append(F1 * F1 - spread)
    F1 = np.concatenate(f1_parts) / math.sqrt(n_k)
    F2 = np.concatenate(f2_parts) / n_k
    s1 = {
        (a, d, b, w): _estimate(F1[:, a, d] * F1[:, b, w])
        for a in range(m)
        for d in range(m)
        for b in range(m)
        for w in range(m)
    }
    s2 = {(a, d): _estimate(F2[:, a, d]) for a in range(m) for d in range(m)}
    return TaylorMoments(s1, s2)


def estimate_k1(rho, c_plus, c_minus, n=1_000_000, samples=100_000, seed=0) -> MomentEstimate:
    """Estimate n (c K1(rho) - rho), whose limit is nu(rho).

    K1(rho) = E[relu_s(g1) relu_s(g2)] with corr(g1, g2) = rho. Antithetic pairs
    (g, -g) and the exact control variate g1 g2 (mean rho) keep the variance
    bounded in n.
    """
    if abs(rho) > 1:
        raise ValueError("need |rho| <= 1")
    rng = _rng(seed)
    c = he_constant(c_plus, c_minus, n)
    z1 = rng.standard_normal(samples)
    z2 = rng.standard_normal(samples)
    g1 = z1
    g2 = rho * z1 + math.sqrt(max(0.0, 1 - rho * rho)) * z2
    s = lambda x: shaped_relu(x, c_plus, c_minus, n)  # noqa: E731
    pair = 0.5 * (s(g1) * s(g2) + s(-g1) * s(-g2))
    return _estimate(n * (c * pair - g1 * g2))


# ---------------------------------------------------------------------------
# one-step moments


@dataclass
class OneStepEstimate:
    """n E[V' - V] and n Cov[V'] per flattened entry, with standard errors."""

    drift: np.ndarray
    drift_se: np.ndarray
    diffusion: np.ndarray
    diffusion_se: np.ndarray
    samples: int

    def drift_estimate(self, i) -> MomentEstimate:
        return MomentEstimate(float(self.drift[i]), float(self.drift_se[i]), self.samples)

    def diffusion_estimate(self, i, j) -> MomentEstimate:
        return MomentEstimate(float(self.diffusion[i, j]), float(self.diffusion_se[i, j]), self.samples)


def _cov(X, n):
    return X @ np.swapaxes(X, -1, -2) / n


def _attention_step(rng, X, config, k):
    """One attention sublayer on a batch of token matrices X (k, m, n).

    Returns the updated tokens and a per-sample unbiased estimate of
    n E[V' - V]. The drift estimate averages the logit sign flip Y -> -Y and
    the value sign flip G -> -G, and drops the exactly mean-zero Wishart
    fluctuation A F (G G^T / n - I) F^T A^T.
    """
    n = config.n
    m = X.shape[-2]
    V = _cov(X, n)
    F = symmat.psd_sqrt(V)
    Y = F @ _logits(rng, np.eye(m), config.n_k, k) @ np.swapaxes(F, -1, -2)
    A = attention_matrix(Y, config)
    Am = attention_matrix(-Y, config)
    # X W^V / sqrt(n) has rows with covariance X X^T / n
    XW = F @ rng.standard_normal((k, m, n))
    out = config.lam * X + config.gamma * (A @ XW)
    AVA = 0.5 * (A @ V @ np.swapaxes(A, -1, -2) + Am @ V @ np.swapaxes(Am, -1, -2))
    drift = n * ((config.lam**2 - 1) * V + config.gamma**2 * AVA)
    return out, drift


def _relu_step(rng, X, config, k):
    """One shaped-ReLU sublayer; drift estimate uses the pre-activation sign
    flip P -> -P and the mean-zero control variate P P^T / n - V."""
    n = config.n
    m = X.shape[-2]
    V = _cov(X, n)
    F = symmat.psd_sqrt(V)
    P = F @ rng.standard_normal((k, m, n))
    H = shaped_relu(P, config.c_plus, config.c_minus, n)
    Hm = shaped_relu(-P, config.c_plus, config.c_minus, n)
    Fh = symmat.psd_sqrt(_cov(H, n))
    c = he_constant(config.c_plus, config.c_minus, n)
    out = config.lam * X + config.gamma * math.sqrt(c) * (Fh @ rng.standard_normal((k, m, n)))
    HH = 0.5 * (_cov(H, n) + _cov(Hm, n))
    g2 = config.gamma**2
    drift = n * ((config.lam**2 - 1) * V + g2 * c * HH - g2 * (_cov(P, n) - V))
    return out, drift


LAYER_KINDS = ("resnet", "attention", "transformer")


def one_step_moments(
    kind, V0, config: NetConfig, samples=100_000, seed=0, reduce_variance=False
) -> OneStepEstimate:
    """Single-layer update statistics from canonical-frame inputs.

    The diffusion is the plain sample covariance of n^{1/2} V'. The drift is
    the plain mean of n (V' - V) unless ``reduce_variance`` is set, in which
    case the unbiased sign-flip/control-variate estimators of the sublayer
    helpers are used; for the Transformer block the two sublayer
    contributions are added, the second evaluated at the sampled intermediate
    covariance. The reduced estimator is precise enough to resolve the
    O(n^{-1/2}) gap between finite-width and limiting drift.
    """
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    V0 = np.asarray(V0, dtype=float)
    m, n = V0.shape[0], config.n
    rng = _rng(seed)
    X0 = np.zeros((m, n))
    X0[:, :m] = math.sqrt(n) * _factor(V0)
    flats, drifts = [], []
    for k in _chunks(samples):
        X = np.broadcast_to(X0, (k, m, n))
        drift = np.zeros((k, m, m))
        if kind in ("attention", "transformer"):
            X, part = _attention_step(rng, X, config, k)
            drift += part
        if kind in ("resnet", "transformer"):
            X, part = _relu_step(rng, X, config, k)
            drift += part
        flats.append(symmat.flatten(_cov(X, n)))
        drifts.append(symmat.flatten(drift))
    x = np.concatenate(flats)
    N = x.shape[0]
    delta = np.concatenate(drifts) if reduce_variance else n * (x - symmat.flatten(V0))
    drift = delta.mean(axis=0)
    drift_se = delta.std(axis=0, ddof=1) / math.sqrt(N)
    xc = x - x.mean(axis=0)
    prod = n * xc[:, :, None] * xc[:, None, :]
    diffusion = prod.mean(axis=0) * N / (N - 1)
    diffusion_se = prod.std(axis=0, ddof=1) / math.sqrt(N)
    return OneStepEstimate(drift, drift_se, diffusion, diffusion_se, N)


def estimate_t2_cov(V, n=400, n_k=None, tau0=1.0, samples=100_000, seed=0):
    """Estimate of the attention correction from Cov[T2] - Sigma_lin, times tau0^2.

    T2 = sqrt(n) A (F G)(F G)^T A^T / n with G an m x n Gaussian; its
    covariance is Sigma_lin(V) + A(V) / tau0^2 to leading order. Returns
    (estimate, standard error) as M x M arrays.
    """
    V = np.asarray(V, dtype=float)
    m = V.shape[0]
    n_k = n if n_k is None else n_k
    config = NetConfig(n=n, m=m, n_k=n_k, tau0=tau0, gamma=1.0, variant="shaped_attention")
    rng = _rng(seed)
    F = _factor(V)
    flats = []
    for k in _chunks(samples):
        Y = F @ _logits(rng, np.eye(m), n_k, k) @ F.T
        A = attention_matrix(Y, config)
        G = F @ rng.standard_normal((k, m, n))
        T2 = math.sqrt(n) * (A @ G @ np.swapaxes(G, -1, -2) @ np.swapaxes(A, -1, -2)) / n
        flats.append(symmat.flatten(T2))
    x = np.concatenate(flats)
    N = x.shape[0]
    xc = x - x.mean(axis=0)
    prod = xc[:, :, None] * xc[:, None, :]
    cov = prod.mean(axis=0) * N / (N - 1)
    se = prod.std(axis=0, ddof=1) / math.sqrt(N)
    scale = tau0 * tau0
    return scale * (cov - coeffs.sigma_lin(V)), scale * se


# ---------------------------------------------------------------------------
# suite


@dataclass
class OracleCheck:
    name: str
    estimate: MomentEstimate
    expected: float

    @property
    def z(self) -> float:
        return self.estimate.z(self.expected)

    @property
    def passed(self) -> bool:
        return self.estimate.agrees(self.expected)


@dataclass
class OracleReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def add(self, name, estimate, expected):
        self.checks.append(OracleCheck(name, estimate, float(expected)))


def _label(pairs):
    return ",".join(f"{a + 1}{b + 1}" for a, b in pairs)


def _one_step_checks(report, kind, V, config, coeff_fn, samples, seed):
    est = one_step_moments(kind, V, config, samples, seed)
    dd = coeff_fn(V, config.coeff_params())
    imap = symmat.index_map(V.shape[0])
    for i, p in enumerate(imap.pairs()):
        report.add(f"{kind} drift {_label([p])}", est.drift_estimate(i), dd.drift[i])
    for i, p in enumerate(imap.pairs()):
        for j, q in enumerate(imap.pairs()):
            if j >= i:
                report.add(
                    f"{kind} diffusion {_label([p, q])}", est.diffusion_estimate(i, j), dd.diffusion[i, j]
                )


def run_suite(samples=100_000, n=400, seed=0, k1_n=1_000_000, nu_fn=None) -> OracleReport:
    """Check every closed-form moment against Monte Carlo at 4 standard errors.

    ``nu_fn`` replaces :func:`coeffs.nu` as the reference for the K1 checks
    (used to show that a wrong nu is caught).
    """
    nu_fn = coeffs.nu if nu_fn is None else nu_fn
    report = OracleReport()
    seeds = iter(np.random.SeedSequence(seed).generate_state(64))

    def rng():
        return np.random.Generator(np.random.PCG64(int(next(seeds))))

    V2, V3 = REFERENCE_V2, REFERENCE_V3

    # dot-product logits: E[Y^{ab} Y^{dw}] = n_k V^{ad} V^{bw}
    n_k = 16
    g = rng()
    for idx in [(0, 1, 0, 1), (0, 1, 1, 0), (0, 0, 1, 1), (0, 0, 0, 0)]:
        a, b, d, w = idx
        est = estimate_y_moment(V2, a, b, d, w, n=n, n_k=n_k, samples=samples, seed=g)
        report.add(f"E[Y{a+1}{b+1} Y{d+1}{w+1}]", est, n_k * V2[a, d] * V2[b, w])
    report.add("E[Y12]", estimate_y_moment(V2, 0, 1, n=n, n_k=n_k, samples=samples, seed=g), 0.0)

    # Taylor moments S1, S2
    for label, V in (("V2", V2), ("V3", V3)):
        tm = estimate_taylor_moments(V, n=n, n_k=64, samples=samples, seed=rng())
        for (a, d, b, w), est in tm.s1.items():
            if (a, d) <= (b, w):
                report.add(f"S1[{label}] {a+1}{d+1},{b+1}{w+1}", est, coeffs.s1(V, a, d, b, w))
        for (a, d), est in tm.s2.items():
            report.add(f"S2[{label}] {a+1}{d+1}", est, coeffs.s2(V, a, d))

    # nu through K1; (1, -1) separates (c+ - c-)^2 from (c+ + c-)^2
    for cp, cm in ((0.0, -1.0), (1.0, -1.0)):
        for rho in (0.0, -0.5, 0.5, 1.0):
            est = estimate_k1(rho, cp, cm, n=k1_n, samples=samples, seed=rng())
            report.add(f"nu rho={rho} c=({cp},{cm})", est, nu_fn(rho, cp, cm))

    # one-step drift and diffusion of each layer type
    gamma = 1 / math.sqrt(2)
    base = NetConfig(n=n, d=1, m=3, gamma=gamma, tau0=1.0, c_plus=0.0, c_minus=-1.0)
    _one_step_checks(
        report, "resnet", V3, base.with_(variant="resnet_relu"), coeffs.resnet_coeffs, samples, rng()
    )
    _one_step_checks(
        report,
        "attention",
        V3,
        base.with_(variant="shaped_attention"),
        lambda V, p: coeffs.attention_coeffs(V, p),
        samples,
        rng(),
    )
    _one_step_checks(
        report,
        "transformer",
        V3,
        base.with_(variant="shaped_transformer"),
        lambda V, p: coeffs.transformer_coeffs(V, p, check=False),
        samples,
        rng(),
    )

    # attention diffusion correction
    for label, V in (("I2", np.eye(2)), ("V3", V3)):
        est, se = estimate_t2_cov(V, n=n, tau0=1.0, samples=samples, seed=rng())
        A = coeffs.a_matrix(V)
        pairs = symmat.index_map(V.shape[0]).pairs()
        for i, p in enumerate(pairs):
            for j, q in enumerate(pairs):
                if j >= i:
                    report.add(
                        f"A[{label}] {_label([p, q])}",
                        MomentEstimate(float(est[i, j]), float(se[i, j]), samples),
                        A[i, j],
                    )
    return report
