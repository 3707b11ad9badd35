"""Ensemble summaries: correlation trajectories, KDE, percentiles, KS distance."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np
from scipy import stats as _sps

from . import symmat


def config_hash(config) -> str:
    """Short stable digest of a (dataclass or mapping) configuration."""
    payload = asdict(config) if is_dataclass(config) else dict(config)
    text = json.dumps(payload, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Ensemble:
    """Terminal flattened covariances, optionally with full trajectories."""

    config_hash: str
    seed: int
    terminal: np.ndarray  # (samples, M)
    trajectories: np.ndarray | None = field(default=None, repr=False)  # (samples, L, M)

    def __post_init__(self):
        self.terminal = np.atleast_2d(np.asarray(self.terminal, dtype=float))
        if self.terminal.shape[0] < 1:
            raise ValueError("an ensemble needs at least one sample")

    @property
    def count(self) -> int:
        return self.terminal.shape[0]

    @property
    def m(self) -> int:
        return symmat.dim_from_flat(self.terminal.shape[-1])

    @classmethod
    def from_net(cls, ens) -> "Ensemble":
        traj = ens.trajectories if ens.recorded else None
        return cls(config_hash(ens.config), ens.seed, ens.terminal, traj)

    @classmethod
    def from_sde(cls, ens) -> "Ensemble":
        return cls(config_hash(ens.config), ens.seed, ens.terminal, ens.paths)


def _rho(flat, m, a=0, b=1):
    """rho^{ab} of flattened covariances; NaN where the state is unusable."""
    flat = np.asarray(flat, dtype=float)
    imap = symmat.index_map(m)
    vab = flat[..., imap.lookup[a, b]]
    vaa = flat[..., imap.lookup[a, a]]
    vbb = flat[..., imap.lookup[b, b]]
    with np.errstate(invalid="ignore", divide="ignore"):
        r = vab / np.sqrt(vaa * vbb)
    return np.clip(r, -1.0, 1.0)


def terminal_correlations(flat, a=0, b=1):
    """rho^{ab} for every sample of an array of flattened covariances."""
    flat = np.asarray(flat, dtype=float)
    return _rho(flat, symmat.dim_from_flat(flat.shape[-1]), a, b)


def mean_correlation_trajectory(ensemble: Ensemble, a=0, b=1):
    """Per-layer mean of rho^{ab} and of |rho^{ab}| over finite samples."""
    if ensemble.trajectories is None:
        raise ValueError("ensemble has no stored trajectories")
    r = _rho(ensemble.trajectories, ensemble.m, a, b)
    with np.errstate(invalid="ignore"):
        return np.nanmean(r, axis=0), np.nanmean(np.abs(r), axis=0)


def mean_abs_covariance_trajectory(ensemble: Ensemble, a=0, b=1):
    """Per-layer mean of |V^{ab}|; overflowed samples are skipped."""
    if ensemble.trajectories is None:
        raise ValueError("ensemble has no stored trajectories")
    k = symmat.index_map(ensemble.m).lookup[a, b]
    v = np.abs(ensemble.trajectories[..., k])
    v = np.where(np.isfinite(v), v, np.nan)
    with np.errstate(invalid="ignore"):
        return np.nanmean(v, axis=0)


@dataclass
class Density:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    degenerate: bool = False
    hist_edges: np.ndarray | None = None
    hist_counts: np.ndarray | None = None


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(np.std(x, ddof=1), (q75 - q25) / 1.34)
    if spread <= 0:
        spread = np.std(x, ddof=1)
    return 0.9 * spread * x.size ** (-0.2)


def kde(samples, bandwidth_rule="silverman", grid_size: int = 512, bins: int = 50) -> Density:
    """Gaussian kernel density on [min - 3h, max + 3h], plus a histogram.

    Zero-spread samples have no usable bandwidth; the result is then flagged
    ``degenerate`` and only the histogram is filled.
    """
    x = np.asarray(samples, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size < 2:
        raise ValueError("kde needs at least two finite samples")
    counts, edges = np.histogram(x, bins=bins, density=True)
    if bandwidth_rule == "silverman":
        h = silverman_bandwidth(x)
    elif isinstance(bandwidth_rule, (int, float)):
        h = float(bandwidth_rule)
    else:
        raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}")
    if not h > 0:
        return Density(np.array([x[0]]), np.array([np.inf]), 0.0, True, edges, counts)
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_size)
    dens = np.zeros(grid_size)
    # chunk over samples to bound memory
    for start in range(0, x.size, 4096):
        u = (grid[:, None] - x[None, start : start + 4096]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= x.size * h * np.sqrt(2 * np.pi)
    return Density(grid, dens, h, False, edges, counts)


def percentile(samples, p):
    """Linear-interpolation percentile (numpy's default convention)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("percentile of an empty sample")
    if np.any(np.asarray(p) < 0) or np.any(np.asarray(p) > 100):
        raise ValueError("p must lie in [0, 100]")
    return np.percentile(x, p)


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance (sup of the CDF gap)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_statistic needs nonempty samples")
    return float(_sps.ks_2samp(a, b).statistic)


def eigenvalue_traces(flat_paths):
    """Max and min eigenvalue of every state, NaN for non-finite states."""
    flat_paths = np.asarray(flat_paths, dtype=float)
    m = symmat.dim_from_flat(flat_paths.shape[-1])
    ok = np.all(np.isfinite(flat_paths), axis=-1)
    w = np.full(flat_paths.shape[:-1] + (m,), np.nan)
    if ok.any():
        w[ok] = symmat.eigvalsh(symmat.unflatten(flat_paths[ok], m))
    return w[..., 0], w[..., -1]
