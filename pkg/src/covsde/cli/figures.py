"""Experiment drivers behind the CLI subcommands."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import finitenet, mcoracle, sdesim, stats, symmat
from . import io

log = logging.getLogger("covsde")

INT_KEYS = {"n", "d", "m", "nk", "samples", "seed"}
FLOAT_KEYS = {"gamma", "tau0", "cplus", "cminus", "step", "rho0", "scale"}
LIST_KEYS = {"gammas"}
STR_KEYS = {"variant", "kind"}

_COMMON = dict(m=2, nk=None, tau0=1.0, cplus=0.0, cminus=-1.0, seed=0, step=0.01, rho0=0.2)

DEFAULTS = {
    "fig1": dict(_COMMON, n=200, d=150, gamma=1 / math.sqrt(8), samples=4096),
    "fig2": dict(_COMMON, n=300, d=100, gamma=None, samples=8192, gammas=None),
    "fig3": dict(_COMMON, n=300, d=150, gamma=1 / math.sqrt(2), samples=8192),
    "fig4": dict(
        _COMMON, n=200, d=200, gamma=None, samples=100, gammas=None, scale=100.0
    ),
    "sde": dict(_COMMON, n=200, d=150, gamma=1 / math.sqrt(8), samples=4096, kind="attention", scale=1.0),
    "net": dict(
        _COMMON, n=200, d=150, gamma=1 / math.sqrt(8), samples=4096, variant="shaped_attention", scale=1.0
    ),
    "oracle": dict(_COMMON, n=400, samples=100_000),
}


def coerce(key: str, value):
    """Convert a config-file or flag string to the parameter's type."""
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
        return None
    if key in INT_KEYS:
        return int(float(value)) if isinstance(value, str) else int(value)
    if key in FLOAT_KEYS:
        return float(value)
    if key in LIST_KEYS:
        if isinstance(value, str):
            value = value.strip("[]() ").replace(";", ",").split(",")
        return [float(v) for v in value if str(v).strip()]
    if key in STR_KEYS:
        return str(value)
    raise KeyError(f"unknown configuration key {key!r}")


@dataclass
class ExperimentSpec:
    command: str
    params: dict
    out: Path = Path("out")
    fmt: str = "csv"
    workers: int | None = None

    @classmethod
    def resolve(cls, command, file_config=None, overrides=None, out="out", fmt="csv", workers=None):
        """Defaults, then config-file values, then explicit overrides."""
        if command not in DEFAULTS:
            raise ValueError(f"unknown command {command!r}")
        params = dict(DEFAULTS[command])
        for source in (file_config or {}, overrides or {}):
            for key, value in source.items():
                if key == "command":
                    continue
                if key not in params:
                    raise KeyError(f"{key!r} is not a parameter of {command}")
                params[key] = coerce(key, value)
        return cls(command, params, Path(out), fmt, workers)

    def config(self) -> dict:
        """Flat resolved configuration embedded in every output file."""
        cfg = {"command": self.command}
        for k, v in self.params.items():
            cfg[k] = ",".join(repr(float(x)) for x in v) if isinstance(v, list) else v
        return {k: ("none" if v is None else v) for k, v in cfg.items()}

    def path(self, name: str) -> Path:
        return self.out / name


def initial_covariance(m, rho0, scale=1.0):
    return scale * ((1 - rho0) * np.eye(m) + rho0 * np.ones((m, m)))


def _net_config(p, **extra) -> finitenet.NetConfig:
    return finitenet.NetConfig(
        n=p["n"],
        d=p["d"],
        m=p["m"],
        n_k=p["nk"],
        gamma=extra.pop("gamma", p.get("gamma")),
        tau0=p["tau0"],
        c_plus=p["cplus"],
        c_minus=p["cminus"],
        **extra,
    )


def _sde_config(p, kind, horizon=None) -> sdesim.SdeConfig:
    T = p["d"] / p["n"] if horizon is None else horizon
    return sdesim.SdeConfig(step=min(p["step"], T), horizon=T, kind=kind)


def _gamma_grid(p, default):
    # an explicit --gamma narrows a sweep to that single value
    if p.get("gammas"):
        return p["gammas"]
    if p.get("gamma") is not None:
        return [p["gamma"]]
    return default


# ---------------------------------------------------------------------------

FIG1_MODELS = ("shaped_attention", "vanilla_softmax", "pre_ln", "shaped_transformer")


def run_fig1(spec: ExperimentSpec) -> dict:
    """Rank collapse with and without shaped attention, plus net vs SDE."""
    p = spec.params
    V0 = initial_covariance(p["m"], p["rho0"])
    cfg = spec.config()
    layers = np.arange(p["d"] + 1)
    columns = ["layer"]
    means = {}
    terminal = None
    for model in FIG1_MODELS:
        log.info("fig1: %s", model)
        ens = finitenet.run_ensemble(
            _net_config(p, variant=model), V0, p["samples"], p["seed"], workers=spec.workers
        )
        mean, mean_abs = stats.mean_correlation_trajectory(stats.Ensemble.from_net(ens))
        means[model] = (mean, mean_abs)
        columns += [f"{model}_mean_rho", f"{model}_mean_abs_rho"]
        if model == "shaped_attention":
            terminal = stats.terminal_correlations(ens.terminal)
    rows = [
        dict(
            layer=int(l),
            **{f"{k}_mean_rho": v[0][l] for k, v in means.items()},
            **{f"{k}_mean_abs_rho": v[1][l] for k, v in means.items()},
        )
        for l in layers
    ]
    io.write_records(spec.path("mean_corr_by_layer"), columns, rows, cfg, spec.fmt)

    log.info("fig1: attention SDE")
    net_cfg = _net_config(p)
    sde = sdesim.simulate_ensemble(
        _sde_config(p, "attention"), net_cfg.coeff_params(), V0, p["samples"], p["seed"], workers=spec.workers
    )
    sde_rho = stats.terminal_correlations(sde.terminal)
    io.write_records(
        spec.path("terminal_corr_samples"),
        ["sample", "rho"],
        [dict(sample=i, rho=r) for i, r in enumerate(terminal)],
        cfg,
        spec.fmt,
    )
    io.write_records(
        spec.path("sde_terminal_corr_samples"),
        ["sample", "rho", "t_stop"],
        [dict(sample=i, rho=r, t_stop=t) for i, (r, t) in enumerate(zip(sde_rho, sde.t_stop))],
        cfg,
        spec.fmt,
    )
    summary = {
        "ks": stats.ks_statistic(terminal, sde_rho),
        "vanilla_final_mean_rho": float(means["vanilla_softmax"][0][-1]),
        "pre_ln_final_mean_rho": float(means["pre_ln"][0][-1]),
        "shaped_final_mean_abs_rho": float(means["shaped_attention"][1][-1]),
        "shaped_transformer_final_mean_abs_rho": float(means["shaped_transformer"][1][-1]),
        "sde_stopped": int(sde.stopped.sum()),
    }
    io.write_json(spec.path("ks"), summary, cfg)
    return summary


def run_fig2(spec: ExperimentSpec) -> dict:
    """Residual shaped-ReLU network across residual strengths."""
    p = spec.params
    V0 = initial_covariance(p["m"], p["rho0"])
    gammas = _gamma_grid(p, [1 / math.sqrt(p["d"]), 0.25, 0.5, 0.75, 1.0])
    cfg = spec.config()
    kde_rows, p95_rows = [], []
    for g in gammas:
        log.info("fig2: gamma=%g", g)
        net_cfg = _net_config(p, gamma=g, variant="resnet_relu")
        net = finitenet.run_ensemble(net_cfg, V0, p["samples"], p["seed"], record=False, workers=spec.workers)
        sde = sdesim.simulate_ensemble(
            _sde_config(p, "resnet"), net_cfg.coeff_params(), V0, p["samples"], p["seed"], workers=spec.workers
        )
        r_net = stats.terminal_correlations(net.terminal)
        r_sde = stats.terminal_correlations(sde.terminal)
        for source, r in (("net", r_net), ("sde", r_sde)):
            dens = stats.kde(r)
            kde_rows += [
                dict(gamma=g, source=source, rho=x, density=y) for x, y in zip(dens.grid, dens.density)
            ]
        p95_rows.append(
            dict(
                gamma=g,
                p95_abs_rho_net=float(stats.percentile(np.abs(r_net), 95)),
                p95_abs_rho_sde=float(stats.percentile(np.abs(r_sde), 95)),
                ks=stats.ks_statistic(r_net, r_sde),
            )
        )
    io.write_records(spec.path("kde_by_gamma"), ["gamma", "source", "rho", "density"], kde_rows, cfg, spec.fmt)
    io.write_records(
        spec.path("p95_by_gamma"),
        ["gamma", "p95_abs_rho_net", "p95_abs_rho_sde", "ks"],
        p95_rows,
        cfg,
        spec.fmt,
    )
    return {"rows": p95_rows}


# label -> (use_identity, use_centering, use_wide_temperature)
INTERVENTIONS = {
    "id, tau2=nnk, center": (True, True, True),
    "tau2=nnk, center": (False, True, True),
    "id, center": (True, True, False),
    "id, tau2=nnk": (True, False, True),
    "only id": (True, False, False),
    "only center": (False, True, False),
    "only tau2=nnk": (False, False, True),
}


def run_fig3(spec: ExperimentSpec) -> dict:
    """Shaped-attention interventions: remove one or two modifications."""
    p = spec.params
    V0 = initial_covariance(p["m"], p["rho0"])
    cfg = spec.config()
    rows, summary = [], {}
    for label, (ident, center, wide) in INTERVENTIONS.items():
        log.info("fig3: %s", label)
        net_cfg = _net_config(
            p, variant="shaped_attention", use_identity=ident, use_centering=center, use_wide_temperature=wide
        )
        ens = finitenet.run_ensemble(net_cfg, V0, p["samples"], p["seed"], workers=spec.workers)
        e = stats.Ensemble.from_net(ens)
        mean_rho, mean_abs_rho = stats.mean_correlation_trajectory(e)
        mean_abs_cov = stats.mean_abs_covariance_trajectory(e)
        for l in range(p["d"] + 1):
            rows.append(
                dict(
                    layer=l,
                    intervention=label,
                    mean_rho=mean_rho[l],
                    mean_abs_rho=mean_abs_rho[l],
                    mean_abs_cov=mean_abs_cov[l],
                )
            )
        summary[label] = dict(
            final_mean_rho=float(mean_rho[-1]),
            final_mean_abs_rho=float(mean_abs_rho[-1]),
            cov_growth=float(mean_abs_cov[-1] / mean_abs_cov[0]),
            overflowed=int((ens.nonfinite_layer >= 0).sum()),
        )
    io.write_records(
        spec.path("ablation_trajectories"),
        ["layer", "intervention", "mean_rho", "mean_abs_rho", "mean_abs_cov"],
        rows,
        cfg,
        spec.fmt,
    )
    return summary


def run_fig4(spec: ExperimentSpec) -> dict:
    """Stopping times from an adversarially large initial covariance."""
    p = spec.params
    V0 = initial_covariance(p["m"], p["rho0"], p["scale"])
    gammas = _gamma_grid(p, [0.01, 0.05, 0.2, 0.5])
    cfg = spec.config()
    times = np.arange(p["d"] + 1) / p["n"]
    rows = []
    for g in gammas:
        log.info("fig4: gamma=%g", g)
        net_cfg = _net_config(p, gamma=g, variant="shaped_attention")
        sde_cfg = _sde_config(p, "attention")
        ens = finitenet.run_ensemble(net_cfg, V0, p["samples"], p["seed"], workers=spec.workers)
        t_net = sdesim.first_exit_times(
            ens.trajectories, times, sde_cfg.eig_lower, sde_cfg.eig_upper, cap=1.0
        )
        sde = sdesim.simulate_ensemble(
            sde_cfg, net_cfg.coeff_params(), V0, p["samples"], p["seed"], workers=spec.workers
        )
        t_sde = np.minimum(sde.t_stop, 1.0)
        rows.append(
            dict(
                gamma=g,
                net_median=float(np.median(t_net)),
                net_p10=float(stats.percentile(t_net, 10)),
                sde_median=float(np.median(t_sde)),
                sde_p10=float(stats.percentile(t_sde, 10)),
            )
        )
    io.write_records(
        spec.path("stopping_times"),
        ["gamma", "net_median", "net_p10", "sde_median", "sde_p10"],
        rows,
        cfg,
        spec.fmt,
    )
    return {"rows": rows}


def run_sde(spec: ExperimentSpec) -> dict:
    p = spec.params
    V0 = initial_covariance(p["m"], p["rho0"], p["scale"])
    net_cfg = _net_config(p)
    ens = sdesim.simulate_ensemble(
        _sde_config(p, p["kind"]), net_cfg.coeff_params(), V0, p["samples"], p["seed"], workers=spec.workers
    )
    pairs = symmat.index_map(p["m"]).pairs()
    names = [f"V{a + 1}{b + 1}" for a, b in pairs]
    rho = stats.terminal_correlations(ens.terminal)
    rows = [
        dict(sample=i, rho=rho[i], t_stop=ens.t_stop[i], **dict(zip(names, ens.terminal[i])))
        for i in range(ens.samples)
    ]
    io.write_records(
        spec.path("sde_terminal"), ["sample", "rho", "t_stop"] + names, rows, spec.config(), spec.fmt
    )
    return {"stopped": int(ens.stopped.sum()), "mean_rho": float(np.nanmean(rho))}


def run_net(spec: ExperimentSpec) -> dict:
    p = spec.params
    V0 = initial_covariance(p["m"], p["rho0"], p["scale"])
    ens = finitenet.run_ensemble(
        _net_config(p, variant=p["variant"]), V0, p["samples"], p["seed"], workers=spec.workers
    )
    e = stats.Ensemble.from_net(ens)
    mean, mean_abs = stats.mean_correlation_trajectory(e)
    cfg = spec.config()
    io.write_records(
        spec.path("net_mean_corr_by_layer"),
        ["layer", "mean_rho", "mean_abs_rho"],
        [dict(layer=l, mean_rho=mean[l], mean_abs_rho=mean_abs[l]) for l in range(p["d"] + 1)],
        cfg,
        spec.fmt,
    )
    rho = stats.terminal_correlations(ens.terminal)
    io.write_records(
        spec.path("net_terminal"),
        ["sample", "rho", "nonfinite_layer"],
        [dict(sample=i, rho=rho[i], nonfinite_layer=int(ens.nonfinite_layer[i])) for i in range(ens.samples)],
        cfg,
        spec.fmt,
    )
    return {"final_mean_rho": float(mean[-1]), "final_mean_abs_rho": float(mean_abs[-1])}


def run_oracles(spec: ExperimentSpec) -> mcoracle.OracleReport:
    p = spec.params
    report = mcoracle.run_suite(samples=p["samples"], n=p["n"], seed=p["seed"])
    rows = [
        dict(
            check=c.name,
            mean=c.estimate.mean,
            std_error=c.estimate.std_error,
            samples=c.estimate.samples,
            expected=c.expected,
            z=c.z,
            passed=c.passed,
        )
        for c in report.checks
    ]
    io.write_records(
        spec.path("oracle_report"),
        ["check", "mean", "std_error", "samples", "expected", "z", "passed"],
        rows,
        spec.config(),
        spec.fmt,
    )
    return report


RUNNERS = {
    "fig1": run_fig1,
    "fig2": run_fig2,
    "fig3": run_fig3,
    "fig4": run_fig4,
    "sde": run_sde,
    "net": run_net,
    "oracle": run_oracles,
}
