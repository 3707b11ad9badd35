"""Euler-Maruyama integration of the covariance SDEs.

The state is the flattened covariance. A sample stops the first time its
post-step state has an eigenvalue outside [eig_lower, eig_upper], turns
non-finite, or yields an indefinite diffusion matrix; stopped samples stay
frozen at their last state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import coeffs, parallel, symmat
from .coeffs import CoeffParams, DriftDiffusion

KINDS = ("resnet", "attention", "transformer")


@dataclass(frozen=True)
class SdeConfig:
    step: float = 0.01
    horizon: float = 0.75
    psd_tol: float = symmat.DEFAULT_PSD_TOL
    eig_upper: float = 1e4
    eig_lower: float = 1e-4
    kind: str = "attention"
    clip_state: bool = False  # project the state onto the PSD cone after each step

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown coefficient selector {self.kind!r}")
        if not 0 < self.step <= self.horizon:
            raise ValueError("need 0 < step <= horizon")
        if not 0 < self.eig_lower < self.eig_upper:
            raise ValueError("need 0 < eig_lower < eig_upper")

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.horizon / self.step - 1e-9))

    def times(self) -> np.ndarray:
        return np.minimum(np.arange(self.n_steps + 1) * self.step, self.horizon)


@dataclass
class SdeTrajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), M); rows after the stop repeat the frozen state
    t_stop: float
    max_eig: np.ndarray
    min_eig: np.ndarray
    stopped: bool = False


@dataclass
class SdeEnsemble:
    config: SdeConfig
    params: CoeffParams
    seed: int
    terminal: np.ndarray  # (samples, M)
    t_stop: np.ndarray  # (samples,)
    stopped: np.ndarray  # (samples,) bool
    paths: np.ndarray | None = field(default=None, repr=False)

    @property
    def samples(self) -> int:
        return self.terminal.shape[0]


def em_step(V, coeffs_: DriftDiffusion, h: float, noise, tol: float = symmat.DEFAULT_PSD_TOL):
    """flat(V) + b h + Sigma^{1/2} sqrt(h) noise, returned as a symmetric matrix."""
    if h <= 0:
        raise ValueError("step must be positive")
    V = np.asarray(V, dtype=float)
    root = symmat.psd_sqrt(coeffs_.diffusion, tol)
    flat = symmat.flatten(V) + coeffs_.drift * h + math.sqrt(h) * (root @ np.asarray(noise, float))
    return symmat.unflatten(flat, V.shape[-1])


def _batched_coeffs(kind, V, params):
    if kind == "resnet":
        return coeffs.resnet_coeffs(V, params)
    if kind == "attention":
        return coeffs.attention_coeffs(V, params)
    return coeffs.transformer_coeffs(V, params, check=False)


def _run_block(config: SdeConfig, params: CoeffParams, V0, count, seed, block, record):
    rng = parallel.block_rng(seed, block, parallel.STREAM_SDE)
    m = V0.shape[-1]
    M = symmat.flat_dim(m)
    times = config.times()
    x = np.broadcast_to(symmat.flatten(V0), (count, M)).copy()
    t_stop = np.full(count, times[-1])
    stopped = np.zeros(count, dtype=bool)
    paths = [x.copy()] if record else None
    eye = symmat.flatten(np.eye(m))
    with np.errstate(all="ignore"):
        for k in range(1, len(times)):
            h = times[k] - times[k - 1]
            noise = rng.standard_normal((count, M))
            live = ~stopped
            xs = np.where(live[:, None], x, eye)
            V = symmat.unflatten(xs, m)
            dd = _batched_coeffs(config.kind, V, params)
            root, indefinite = symmat.psd_sqrt_masked(dd.diffusion, config.psd_tol)
            step = dd.drift * h + math.sqrt(h) * np.einsum("bij,bj->bi", root, noise)
            new = xs + step
            if config.clip_state:
                new = symmat.flatten(symmat.clip_psd(symmat.unflatten(new, m)))
            finite = np.all(np.isfinite(new), axis=1)
            w = np.full((count, m), np.nan)
            if finite.any():
                w[finite] = symmat.eigvalsh(symmat.unflatten(new[finite], m))
            exit_ = ~finite | indefinite | (w[:, 0] > config.eig_upper) | (w[:, -1] < config.eig_lower)
            hit = live & exit_
            # frozen samples keep their state; a sample that exits keeps the exit state
            # unless it is unusable, in which case the last good state is kept
            keep_new = live & (finite & ~indefinite)
            x = np.where(keep_new[:, None], new, x)
            t_stop[hit] = times[k]
            stopped |= hit
            if record:
                paths.append(x.copy())
    return x, t_stop, stopped, (np.stack(paths, axis=1) if record else None)


def simulate_ensemble(
    config: SdeConfig,
    params: CoeffParams,
    V0,
    samples: int,
    seed: int = 0,
    record: bool = False,
    workers=None,
) -> SdeEnsemble:
    V0 = np.asarray(V0, dtype=float)
    symmat.psd_sqrt(V0)
    jobs = [
        (config, params, V0, size, seed, k, record)
        for k, size in enumerate(parallel.block_sizes(samples))
    ]
    parts = parallel.map_blocks(_run_block, jobs, workers)
    return SdeEnsemble(
        config=config,
        params=params,
        seed=seed,
        terminal=np.concatenate([p[0] for p in parts]),
        t_stop=np.concatenate([p[1] for p in parts]),
        stopped=np.concatenate([p[2] for p in parts]),
        paths=np.concatenate([p[3] for p in parts]) if record else None,
    )


def simulate_sde(config: SdeConfig, params: CoeffParams, V0, seed: int = 0) -> SdeTrajectory:
    """Single trajectory with eigenvalue traces."""
    ens = simulate_ensemble(config, params, V0, 1, seed, record=True, workers=1)
    states = ens.paths[0]
    w = symmat.eigvalsh(symmat.unflatten(states))
    return SdeTrajectory(
        times=config.times(),
        states=states,
        t_stop=float(ens.t_stop[0]),
        max_eig=w[:, 0],
        min_eig=w[:, -1],
        stopped=bool(ens.stopped[0]),
    )


def stopping_time(trajectory: SdeTrajectory) -> float:
    return trajectory.t_stop


def first_exit_times(states, times, eig_lower=1e-4, eig_upper=1e4, cap=None):
    """First grid time (index >= 1) where an eigenvalue leaves [lower, upper].

    ``states`` has shape (samples, len(times), M). Non-finite states count as
    exits. Samples that never exit get the final time; results are capped at
    ``cap`` when given.
    """
    states = np.asarray(states, dtype=float)
    times = np.asarray(times, dtype=float)
    samples, L, M = states.shape
    m = symmat.dim_from_flat(M)
    finite = np.all(np.isfinite(states), axis=-1)
    w = np.full((samples, L, m), np.nan)
    if finite.any():
        w[finite] = symmat.eigvalsh(symmat.unflatten(states[finite], m))
    with np.errstate(invalid="ignore"):
        out = ~finite | (w[..., 0] > eig_upper) | (w[..., -1] < eig_lower)
    out[:, 0] = False
    t = np.where(out.any(axis=1), times[np.argmax(out, axis=1)], times[-1])
    if cap is not None:
        t = np.minimum(t, cap)
    return t


def sample_output(V_T, n_out: int, count: int, seed=None):
    """Draws of shape (count, m, n_out); each output coordinate is N(0, V_T)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    S = symmat.psd_sqrt(V_T)
    m = S.shape[-1]
    return S @ rng.standard_normal((count, m, n_out))
