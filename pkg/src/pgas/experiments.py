"""Configuration-driven experiment harness.

Four studies are available:

``rbps-lgssm``
    PGAS and PGBS on a 4th-order linear system with three states
    marginalized, compared through running RMSE against the exact smoother.
``random-systems``
    Random stable systems with rank-1 process noise, reduced by SVD, run at
    several fixed truncation levels and with the adaptive rule.
``ct-tracking``
    Joint state and turn-parameter inference in the coordinated-turn model,
    with PGAS plus an MH parameter step, and PMMH as a reference.
``prop1-bound``
    KL divergences of truncated backward distributions on synthetic
    geometric-decay instances against the analytic bound.

Outputs are CSV files (UTF-8, header row) and a ``manifest.json`` written
last, listing every file with its SHA-256. Identical configurations and seeds
produce identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .gaussian import exact_smoother, random_stable_system
from .kernels import ChainConfig, ChainInterrupted, _jsonable, initial_state, run_chain, run_csmc_as
from .models import (
    CT_TRUE_INIT,
    MarginalizedLgssm,
    coordinated_turn_model,
    linear_svd_model,
    rbps_system,
    simulate_ct,
)
from .streams import stream
from .truncation import (
    TruncationConfig,
    adaptive_backward_dist,
    kld_bound,
    synthetic_decay_instance,
    truncation_klds,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunningRmseSeries",
    "StreamingRmse",
    "running_rmse",
    "run_experiment",
    "EXPERIMENTS",
    "OUTPUT_ROOT_ENV",
]

OUTPUT_ROOT_ENV = "PGAS_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# -- running RMSE ---------------------------------------------------------------------


@dataclass
class RunningRmseSeries:
    """eps_r for r = 1..S over the stored (post-burn-in) samples."""

    values: np.ndarray
    burn_in: int = 0

    def __len__(self):
        return len(self.values)

    @property
    def final(self):
        return float(self.values[-1])

    def iterations(self):
        return self.burn_in + np.arange(1, len(self.values) + 1)


def _check_dims(samples, exact):
    if samples.ndim != 3 or samples.shape[1:] != exact.shape:
        raise ValueError(f"samples of shape {samples.shape} do not match exact means {exact.shape}")


def running_rmse(samples, exact_means, burn_in=0):
    """Running RMSE of the sample mean against exact posterior means.

    eps_r = sqrt(mean_{t,i} (xbar_{t,i}(r) - mu_{t,i})^2), with xbar(r) the
    mean of stored samples 1..r.

    Parameters
    ----------
    samples : array, shape (S, T, d)
    exact_means : array, shape (T, d)
    burn_in : int
        Number of discarded iterations, kept for labelling only.
    """
    samples = np.asarray(samples, dtype=float)
    exact = np.asarray(exact_means, dtype=float)
    if samples.ndim == 2 and exact.ndim == 1:
        samples, exact = samples[..., None], exact[:, None]
    _check_dims(samples, exact)
    if samples.shape[0] == 0:
        raise ValueError("no samples")
    return StreamingRmse(exact, burn_in).update(samples)


class StreamingRmse:
    """Running RMSE computed batch by batch; agrees with :func:`running_rmse`."""

    def __init__(self, exact_means, burn_in=0):
        self.exact = np.asarray(exact_means, dtype=float)
        self.burn_in = burn_in
        self.total = np.zeros_like(self.exact)
        self.count = 0
        self._values = []

    def update(self, batch):
        batch = np.asarray(batch, dtype=float)
        _check_dims(batch, self.exact)
        sums = np.cumsum(np.concatenate([self.total[None], batch]), axis=0)[1:]
        counts = self.count + np.arange(1, batch.shape[0] + 1)
        err = sums / counts[:, None, None] - self.exact
        vals = np.sqrt(np.mean(err * err, axis=(1, 2)))
        self.total = sums[-1]
        self.count = int(counts[-1])
        self._values.append(vals)
        return RunningRmseSeries(np.concatenate(self._values), self.burn_in)

    @property
    def series(self):
        vals = np.concatenate(self._values) if self._values else np.zeros(0)
        return RunningRmseSeries(vals, self.burn_in)


# -- configuration ----------------------------------------------------------------------

EXPERIMENTS = ("rbps-lgssm", "random-systems", "ct-tracking", "prop1-bound")

DEFAULTS = {
    "rbps-lgssm": {
        "T": 100, "N": 5, "R": 10000, "burn_in": 1000,
        "truncation": {"mode": "fixed", "p": 1},
        "kernels": ["pgas", "pgbs"], "data_seed": 2013, "thin": 1,
    },
    "random-systems": {
        "orders": [2, 5, 20], "outputs": [1, 2, 4], "systems_per_order": 10,
        "T": 200, "N": 5, "R": 1000, "burn_in": 100,
        "fixed_levels": {"2": [1, 2, 3], "5": [1, 5, 10], "20": [1, 5, 10]},
        "adaptive": {"gamma_forget": 0.1, "tau": 0.01},
        "kernels": ["pgas"], "system_seed": 150, "trace_time": None,
    },
    "ct-tracking": {
        "T": 50, "N": 5, "R": 5000, "burn_in": 1000, "sigma": 0.2,
        "truncation": {"mode": "adaptive", "gamma_forget": 0.1, "tau": 0.01},
        "theta_true": 1.0, "theta0": 0.5, "data_seed": 63,
        "pmmh": {"N": 500, "R": 5000, "burn_in": 1000, "sigma": 0.2},
        "histogram_bins": 40,
    },
    "prop1-bound": {
        "A": [0.5, 2.0], "c": [0.2, 1.0], "M": 50, "N": 10, "instances": 1000,
    },
}


@dataclass
class ExperimentConfig:
    """One experiment: its id, parameters, seed list and output directory."""

    experiment: str
    seeds: list = field(default_factory=lambda: [0])
    params: dict = field(default_factory=dict)
    output_dir: str = "results"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not isinstance(self.seeds, (list, tuple)) or not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        unknown = set(self.params) - set(DEFAULTS[self.experiment])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.experiment}: {sorted(unknown)}")
        p = self.resolved()
        for key in ("R", "burn_in", "N", "T"):
            if key in p and (not isinstance(p[key], int) or p[key] < 0):
                raise ConfigError(f"{key} must be a nonnegative integer")
        if "R" in p and not 0 <= p["burn_in"] < p["R"]:
            raise ConfigError("need 0 <= burn_in < R")
        for key in ("truncation", "adaptive"):
            if key in p:
                try:
                    spec = p[key] if key == "truncation" else {"mode": "adaptive", **p[key]}
                    TruncationConfig.from_dict(spec)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {key}: {exc}") from None
        if "kernels" in p:
            bad = set(p["kernels"]) - {"pgas", "pgbs"}
            if bad:
                raise ConfigError(f"unsupported kernels {sorted(bad)}")
        if self.experiment == "random-systems":
            if len(p["orders"]) != len(p["outputs"]):
                raise ConfigError("orders and outputs must have the same length")
            for d in p["orders"]:
                if str(d) not in p["fixed_levels"]:
                    raise ConfigError(f"no fixed truncation levels for order {d}")

    def resolved(self):
        """Parameters with defaults filled in."""
        out = dict(DEFAULTS[self.experiment])
        out.update(self.params)
        return out

    def to_dict(self):
        return {"experiment": self.experiment, "seeds": list(self.seeds),
                "params": self.params, "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        extra = set(data) - {"experiment", "seeds", "params", "output_dir"}
        if extra:
            raise ConfigError(f"unknown configuration keys {sorted(extra)}")
        if "experiment" not in data:
            raise ConfigError("missing 'experiment'")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)


# -- output helpers --------------------------------------------------------------------


class _Outputs:
    def __init__(self, root: Path):
        self.root = root
        self.files = []
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def manifest(self, config, status, summary, error=None):
        entries = []
        for name in sorted(self.files):
            data = (self.root / name).read_bytes()
            entries.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(),
                            "bytes": len(data)})
        doc = {"experiment": config.experiment, "version": __version__, "status": status,
               "config": config.to_dict(), "resolved_params": config.resolved(),
               "files": entries, "summary": _jsonable(summary)}
        if error is not None:
            doc["error"] = error
        path = self.root / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    if v is None:
        return ""
    return v


def _truncation(spec):
    return TruncationConfig.from_dict(spec)


# -- studies ---------------------------------------------------------------------------


def _run_rbps(config, out, summary):
    p = config.resolved()
    system = rbps_system()
    states, obs = system.simulate(p["T"], stream(p["data_seed"], 0))
    model = MarginalizedLgssm(system, dim_x=1)
    exact = model.smoothed_x_means(obs)
    out.csv("data.csv", ["t"] + [f"state_{i}" for i in range(4)] + ["obs_0"],
            ([t, *states[t], obs[t, 0]] for t in range(p["T"])))
    out.csv("exact_means.csv", ["t", "mean"], ([t, exact[t, 0]] for t in range(p["T"])))
    trunc = _truncation(p["truncation"])
    rows, finals = [], []
    for k, kernel in enumerate(p["kernels"]):
        for seed in config.seeds:
            cfg = ChainConfig(N=p["N"], R=p["R"], burn_in=p["burn_in"], truncation=trunc,
                              seed=seed, kernel=kernel, thin=p["thin"])
            store = run_chain(model, obs, cfg, stream(seed, 1, k))
            store.to_csv(out.path(f"samples/{kernel}_seed{seed}.csv"))
            series = running_rmse(store.trajectories, exact, p["burn_in"])
            rows.extend((kernel, seed, it, v) for it, v in zip(series.iterations(), series.values))
            finals.append((kernel, seed, series.final,
                           store.diagnostics["mean_level_per_draw"]))
    out.csv("rmse.csv", ["kernel", "seed", "iteration", "rmse"], rows)
    out.csv("summary.csv", ["kernel", "seed", "final_rmse", "mean_level"], finals)
    med = {kern: float(np.median([f[2] for f in finals if f[0] == kern])) for kern in p["kernels"]}
    summary["median_final_rmse"] = med
    if {"pgas", "pgbs"} <= set(med):
        summary["pgbs_over_pgas"] = med["pgbs"] / med["pgas"]


def _levels_for(p, d):
    return [int(v) for v in p["fixed_levels"][str(d)]]


def _run_random_systems(config, out, summary):
    p = config.resolved()
    T = p["T"]
    rows, finals = [], []
    for i, (d, dy) in enumerate(zip(p["orders"], p["outputs"])):
        for j in range(p["systems_per_order"]):
            rng_sys = stream(p["system_seed"], d, j)
            system = random_stable_system(d, dy, rng_sys)
            system.to_json(out.path(f"systems/d{d}_s{j}.json"))
            _, obs = system.simulate(T, rng_sys)
            exact = exact_smoother(system, obs).means
            model = linear_svd_model(system)
            truncs = [TruncationConfig.fixed(lv) for lv in _levels_for(p, d)]
            truncs.append(TruncationConfig.adaptive(**p["adaptive"]))
            for k, kernel in enumerate(p["kernels"]):
                for seed in config.seeds:
                    for li, trunc in enumerate(truncs):
                        cfg = ChainConfig(N=p["N"], R=p["R"], burn_in=p["burn_in"],
                                          truncation=trunc, seed=seed, kernel=kernel)
                        store = run_chain(model, obs, cfg, stream(seed, d, j, k, li))
                        series = running_rmse(model.states(store.trajectories), exact,
                                              p["burn_in"])
                        label = trunc.label
                        rows.extend((d, j, kernel, seed, label, it, v)
                                    for it, v in zip(series.iterations(), series.values))
                        finals.append((d, j, kernel, seed, label, series.final,
                                       store.diagnostics["mean_level_per_draw"],
                                       mean_horizon(T)))
            if j == 0:
                _write_trace(out, model, obs, p, d, seed=config.seeds[0])
    out.csv("rmse.csv", ["order", "system", "kernel", "seed", "truncation", "iteration", "rmse"],
            rows)
    out.csv("summary.csv", ["order", "system", "kernel", "seed", "truncation", "final_rmse",
                            "mean_level", "mean_horizon"], finals)
    summary["systems"] = len(p["orders"]) * p["systems_per_order"]
    summary["mean_adaptive_level"] = {
        str(d): float(np.mean([f[6] for f in finals if f[0] == d and f[4] == "adaptive"]))
        for d in p["orders"]}


def _write_trace(out, model, obs, p, d, seed):
    """Backward distributions for increasing truncation levels at one time step."""
    rng = stream(seed, 99, d)
    T = obs.shape[0]
    ref = initial_state(model, obs, p["N"], rng).trajectory
    hist = run_csmc_as(model, obs, p["N"], ref, rng, TruncationConfig.adaptive(**p["adaptive"]),
                       keep_carries=True)
    t = p["trace_time"] if p["trace_time"] is not None else T // 2
    _, _, trace = adaptive_backward_dist(model, hist.carries[t], hist.log_weights[t],
                                         ref[t + 1:], obs, t, p["adaptive"]["gamma_forget"],
                                         0.0, min(20, T - t - 1), keep_trace=True)
    trace.to_csv(out.path(f"traces/d{d}_t{t}.csv"))


def _run_ct(config, out, summary):
    p = config.resolved()
    T = p["T"]
    states, obs = simulate_ct(T, stream(p["data_seed"], 0), theta=p["theta_true"],
                              xi1=CT_TRUE_INIT)
    model = coordinated_turn_model(theta=p["theta0"])
    out.csv("data.csv", ["t", "px", "py", "vx", "vy", "range", "bearing"],
            ([t, *states[t], *obs[t]] for t in range(T)))
    trunc = _truncation(p["truncation"])
    runs = [("pgas", ChainConfig(N=p["N"], R=p["R"], burn_in=p["burn_in"], truncation=trunc,
                                 kernel="pgas", theta_step=p["sigma"]))]
    pm = p["pmmh"]
    if pm:
        runs.append(("pmmh", ChainConfig(N=pm["N"], R=pm["R"], burn_in=pm["burn_in"],
                                         kernel="pmmh", theta_step=pm["sigma"])))
    stats = {}
    for k, (name, base) in enumerate(runs):
        for seed in config.seeds:
            cfg = replace(base, seed=seed)
            store = run_chain(model, obs, cfg, stream(seed, 2, k))
            th = store.thetas[:, 0]
            out.csv(f"theta_{name}_seed{seed}.csv", ["iteration", "theta"],
                    zip(store.iterations, th))
            counts, edges = np.histogram(th, bins=p["histogram_bins"])
            out.csv(f"theta_hist_{name}_seed{seed}.csv", ["left", "right", "count"],
                    zip(edges[:-1], edges[1:], counts))
            xi = model.states(store.trajectories, thetas=store.thetas)
            mean = xi.mean(axis=0)
            out.csv(f"smoothed_{name}_seed{seed}.csv", ["t", "px", "py", "vx", "vy"],
                    ([t, *mean[t]] for t in range(T)))
            d = store.diagnostics
            stats[f"{name}_seed{seed}"] = {
                "theta_mean": float(th.mean()), "theta_sd": float(th.std()),
                "mean_level": d.get("mean_level_per_draw"),
                "acceptance": d.get("acceptance_rate", d.get("theta_acceptance_rate")),
            }
    out.csv("summary.csv", ["run", "theta_mean", "theta_sd", "mean_level", "acceptance"],
            ([k, v["theta_mean"], v["theta_sd"], v["mean_level"], v["acceptance"]]
             for k, v in stats.items()))
    summary["runs"] = stats


def _run_prop1(config, out, summary):
    p = config.resolved()
    M, N = p["M"], p["N"]
    rows, violations, worst = [], 0, 0.0
    for seed in config.seeds:
        for ai, A in enumerate(p["A"]):
            for ci, c in enumerate(p["c"]):
                klds = np.empty((p["instances"], M + 1))
                for i in range(p["instances"]):
                    log_w, log_h = synthetic_decay_instance(N, M, A, c, stream(seed, ai, ci, i))
                    klds[i] = truncation_klds(log_w, log_h)
                for q in range(M + 1):
                    bound = kld_bound(A, c, q, M)
                    col = klds[:, q]
                    v = int(np.sum(col > bound))
                    violations += v
                    if bound > 0:
                        worst = max(worst, float(col.max() / bound))
                    rows.append((seed, A, c, q, float(col.mean()), float(col.max()), bound, v))
    out.csv("bound.csv", ["seed", "A", "c", "p", "kld_mean", "kld_max", "bound", "violations"],
            rows)
    summary["violations"] = violations
    summary["max_kld_over_bound"] = worst


_RUNNERS = {
    "rbps-lgssm": _run_rbps,
    "random-systems": _run_random_systems,
    "ct-tracking": _run_ct,
    "prop1-bound": _run_prop1,
}


def output_directory(config, root=None):
    """Directory for a run: ``output_dir`` under ``root`` or ``$PGAS_OUTPUT_ROOT``."""
    root = root if root is not None else os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(config.output_dir)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def run_experiment(config: ExperimentConfig, root=None):
    """Run one experiment and return the path of its manifest.

    On failure a manifest with status ``"partial"`` is written before the
    exception propagates.
    """
    out = _Outputs(output_directory(config, root))
    summary = {}
    try:
        _RUNNERS[config.experiment](config, out, summary)
    except Exception as exc:
        if isinstance(exc, ChainInterrupted):
            summary["partial_samples"] = len(exc.store)
        out.manifest(config, "partial", summary, error=repr(exc))
        raise
    return out.manifest(config, "complete", summary)


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def mean_horizon(T):
    """Average of T - t over backward draws at t = 1..T-1 (1-based)."""
    return T / 2.0 if T > 1 else math.nan
