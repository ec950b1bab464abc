"""Particle MCMC kernels: conditional SMC with ancestor sampling (PGAS), PG with
backward simulation (PGBS), the FFBSi smoother, PMMH and the Metropolis-Hastings
parameter update, plus a chain driver with a CSV/JSON sample store.

Indices are 0-based. The conditioned path is kept in slot N-1 unless other
slots are requested explicitly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .model import StateSpaceModel, as_observations, as_trajectory, log_gamma
from .smc import (
    ParticleCollapse,
    SmcHistory,
    _weights,
    lineage_indices,
    normalize_log_weights,
    run_smc,
    sample_categorical,
    trace_lineage,
)
from .streams import make_rng
from .truncation import (
    DegenerateBackwardWeights,
    TruncationConfig,
    adaptive_backward_dist,
    truncated_backward_logweights,
)

__all__ = [
    "ChainConfig",
    "ChainState",
    "ChainInterrupted",
    "SampleStore",
    "backward_sampling_dist",
    "run_csmc_as",
    "pgas_iteration",
    "pgbs_iteration",
    "ffbsi",
    "pmmh_iteration",
    "mh_parameter_update",
    "run_chain",
    "KERNELS",
]

UNTRUNCATED = TruncationConfig.untruncated()


def _draw(probs, rng):
    """Single inverse-CDF draw from normalized probabilities."""
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, (1.0 - rng.random()) * cdf[-1], side="left"))


def backward_sampling_dist(model, carry, log_weights, suffix, obs, t, truncation=UNTRUNCATED,
                           *, exploit_markov=True, keep_trace=False):
    """Law of the index linking a prefix at time ``t`` to the reference suffix.

    Probabilities are proportional to w_t^m gamma_{t+p}(x_{1:t}^m, x'_{t+1:t+p}) /
    gamma_t(x_{1:t}^m), with p = T - t - 1 future states when untruncated.
    For Markovian models every factor beyond the first is common to all
    particles, so with ``exploit_markov`` a single factor is evaluated in the
    untruncated and fixed modes.

    Returns ``(probabilities, level, trace)``; ``trace`` is only built for the
    adaptive rule with ``keep_trace``.
    """
    horizon = len(suffix)
    if horizon < 1:
        raise ValueError("the reference suffix is empty")
    if truncation.mode == "adaptive":
        return adaptive_backward_dist(model, carry, log_weights, suffix, obs, t,
                                      truncation.gamma_forget, truncation.tau,
                                      truncation.p_max, keep_trace)
    p = 1 if (exploit_markov and model.markov) else truncation.level(horizon)
    logw = truncated_backward_logweights(model, carry, log_weights, suffix, obs, t, p)
    try:
        return normalize_log_weights(logw), p, None
    except ParticleCollapse as exc:
        raise DegenerateBackwardWeights(str(exc)) from None


def run_csmc_as(model: StateSpaceModel, obs, N, reference, rng, truncation=UNTRUNCATED, *,
                ancestor_sampling=True, slots=None, keep_carries=False, exploit_markov=True):
    """Conditional SMC keeping ``reference`` in ``slots`` (default N-1 at every t).

    With ``ancestor_sampling`` the ancestor of the conditioned particle is
    redrawn at each step from the (possibly truncated) backward weights;
    otherwise it is the previous conditioned slot, as in plain CSMC.
    The returned history also holds the slots and the truncation levels used.
    """
    obs = as_observations(obs, model.dim_y)
    T = obs.shape[0]
    reference = as_trajectory(reference, model.dim_x)
    if reference.shape[0] != T:
        raise ValueError(f"reference has length {reference.shape[0]}, expected {T}")
    if N < 1:
        raise ValueError("N must be positive")
    if slots is None:
        slots = np.full(T, N - 1, dtype=np.int64)
    else:
        slots = np.asarray(slots, dtype=np.int64)
        if slots.shape != (T,) or slots.min() < 0 or slots.max() >= N:
            raise ValueError("slots must be T indices in 0..N-1")
    dx = model.dim_x
    X = np.empty((T, N, dx))
    LW = np.empty((T, N))
    A = np.full((T, N), -1, dtype=np.int64)
    LNU = np.zeros((T, N))
    LZ = np.empty(T)
    levels = np.zeros(T, dtype=np.int64)
    carries = [] if keep_carries else None
    all_idx = np.arange(N)

    carry = model.init_carry(N)
    x = model.sample_proposal(carry, 0, obs[0], rng)
    b = slots[0]
    x[b] = reference[0]
    log_f, log_g, new_carry = model.increment(carry, x, obs[0], 0)
    logw = _weights(model, carry, x, obs[0], 0, log_f, log_g, None)
    carry = new_carry
    X[0], LW[0] = x, logw
    if keep_carries:
        carries.append(carry)
    for t in range(1, T):
        b_prev, b = b, slots[t]
        log_nu = model.log_adjustment(carry, t - 1, obs[t])
        lw_res = logw if log_nu is None else logw + log_nu
        if log_nu is not None:
            LNU[t - 1] = log_nu
        a = np.empty(N, dtype=np.int64)
        others = sample_categorical(lw_res, N - 1, rng) if N > 1 else a[:0]
        if b == N - 1:
            a[:-1] = others
        else:
            a[all_idx != b] = others
        if ancestor_sampling and N > 1:
            probs, level, _ = backward_sampling_dist(model, carry, logw, reference[t:], obs, t - 1,
                                                     truncation, exploit_markov=exploit_markov)
            a[b] = _draw(probs, rng)
            levels[t] = level
        else:
            a[b] = b_prev
        carry_anc = model.take(carry, a)
        x = model.sample_proposal(carry_anc, t, obs[t], rng)
        x[b] = reference[t]
        log_f, log_g, new_carry = model.increment(carry_anc, x, obs[t], t)
        logw = _weights(model, carry_anc, x, obs[t], t, log_f, log_g,
                        None if log_nu is None else log_nu[a])
        carry = new_carry
        X[t], LW[t], A[t] = x, logw, a
        if keep_carries:
            carries.append(carry)
    for t in range(T):
        m = np.max(LW[t])
        if not np.isfinite(m):
            raise ParticleCollapse(f"all weights vanished at t={t}")
        LZ[t] = m + np.log(np.mean(np.exp(LW[t] - m)))
    hist = SmcHistory(X, LW, A, LNU, LZ, carries, levels, slots)
    return hist


@dataclass
class ChainState:
    trajectory: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iteration: int = 0
    log_likelihood: float = float("nan")  # PMMH likelihood estimate


@dataclass(frozen=True)
class ChainConfig:
    """Settings of one chain. ``R`` counts all iterations, burn-in included."""

    N: int = 5
    R: int = 1000
    burn_in: int = 100
    truncation: TruncationConfig = UNTRUNCATED
    seed: int = 0
    kernel: str = "pgas"
    theta_step: float | None = None
    thin: int = 1

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if not 0 <= self.burn_in < self.R:
            raise ValueError("need 0 <= burn_in < R")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; choose from {sorted(KERNELS)}")
        if self.kernel in ("pgas", "pgbs") and self.N < 2:
            # N = 1 is only meaningful for identity checks; allowed but flagged
            pass
        if self.theta_step is not None and self.theta_step <= 0:
            raise ValueError("theta_step must be positive")
        if self.thin < 1:
            raise ValueError("thin must be positive")

    def to_dict(self):
        d = dict(self.__dict__)
        d["truncation"] = self.truncation.to_dict()
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "truncation" in data:
            data["truncation"] = TruncationConfig.from_dict(data["truncation"])
        return cls(**data)


def _final_draw(hist, rng):
    return int(sample_categorical(hist.log_weights[-1], 1, rng)[0])


def pgas_iteration(state: ChainState, model, obs, config: ChainConfig, rng, *, exploit_markov=True):
    """One PGAS sweep: CSMC with ancestor sampling, then k ~ w_T and lineage tracing.

    Returns ``(new_state, info)``; ``info`` holds the history, the per-step
    truncation levels and whether the conditioned ancestor moved.
    """
    hist = run_csmc_as(model, obs, config.N, state.trajectory, rng, config.truncation,
                       exploit_markov=exploit_markov)
    k = _final_draw(hist, rng)
    b = lineage_indices(hist.ancestors, k)
    traj = hist.particles[np.arange(hist.T), b]
    slots = hist.reference_slots
    moved = hist.ancestors[1:, :][np.arange(hist.T - 1), slots[1:]] != slots[:-1]
    info = {"history": hist, "levels": hist.levels[1:], "ancestor_moved": moved}
    return replace(state, trajectory=traj, iteration=state.iteration + 1), info


def backward_pass(model, hist: SmcHistory, obs, rng, truncation=UNTRUNCATED, *, exploit_markov=True,
                  keep_trace=False):
    """One backward trajectory through a history with stored carries."""
    if hist.carries is None:
        raise ValueError("backward simulation needs a history with carries")
    T = hist.T
    out = np.empty((T, hist.particles.shape[2]))
    levels = np.zeros(T, dtype=np.int64)
    traces = []
    b = _final_draw(hist, rng)
    out[-1] = hist.particles[-1, b]
    for t in range(T - 2, -1, -1):
        probs, level, trace = backward_sampling_dist(model, hist.carries[t], hist.log_weights[t],
                                                     out[t + 1:], obs, t, truncation,
                                                     exploit_markov=exploit_markov,
                                                     keep_trace=keep_trace)
        b = _draw(probs, rng)
        out[t] = hist.particles[t, b]
        levels[t] = level
        if keep_trace:
            traces.append((t, trace))
    return out, levels, traces


def pgbs_iteration(state: ChainState, model, obs, config: ChainConfig, rng, *, exploit_markov=True):
    """One PGBS sweep: plain CSMC followed by a full backward simulation pass."""
    obs = as_observations(obs, model.dim_y)
    hist = run_csmc_as(model, obs, config.N, state.trajectory, rng, config.truncation,
                       ancestor_sampling=False, keep_carries=True)
    if config.N == 1:
        traj = trace_lineage(hist, 0)
        levels = np.zeros(hist.T - 1, dtype=np.int64)
    else:
        traj, levels, _ = backward_pass(model, hist, obs, rng, config.truncation,
                                        exploit_markov=exploit_markov)
        levels = levels[:-1]
    info = {"history": hist, "levels": levels, "ancestor_moved": None}
    return replace(state, trajectory=traj, iteration=state.iteration + 1), info


class _RepeatedSuffix:
    """Suffix view for M backward trajectories, each repeated for N particles."""

    def __init__(self, trajs, start, N):
        self.trajs, self.start, self.N = trajs, start, N

    def __len__(self):
        return self.trajs.shape[1] - self.start

    def __getitem__(self, s):
        return np.repeat(self.trajs[:, self.start + s], self.N, axis=0)


def ffbsi(model, obs, N, M, rng, truncation=UNTRUNCATED, *, history=None, exploit_markov=True,
          batch=None):
    """Forward filter / backward simulator: ``M`` trajectories from one SMC run.

    Backward trajectories are advanced together in batches of ``batch`` for
    fixed or untruncated weights. Returns an array of shape (M, T, d_x).
    """
    obs = as_observations(obs, model.dim_y)
    if M < 1:
        raise ValueError("M must be positive")
    hist = history if history is not None else run_smc(model, obs, N, rng, keep_carries=True)
    T, N, dx = hist.particles.shape
    out = np.empty((M, T, dx))
    if truncation.mode == "adaptive":
        for j in range(M):
            out[j] = backward_pass(model, hist, obs, rng, truncation)[0]
        return out
    if batch is None:
        batch = max(1, 200_000 // N)
    for start in range(0, M, batch):
        stop = min(M, start + batch)
        m = stop - start
        trajs = out[start:stop]
        b = sample_categorical(hist.log_weights[-1], m, rng)
        trajs[:, -1] = hist.particles[-1, b]
        tile = np.tile(np.arange(N), m)
        for t in range(T - 2, -1, -1):
            horizon = T - 1 - t
            p = 1 if (exploit_markov and model.markov) else truncation.level(horizon)
            carry = model.take(hist.carries[t], tile)
            lw = truncated_backward_logweights(model, carry, np.tile(hist.log_weights[t], m),
                                               _RepeatedSuffix(trajs, t + 1, N), obs, t, p)
            lw = lw.reshape(m, N)
            mx = lw.max(axis=1, keepdims=True)
            if not np.all(np.isfinite(mx)):
                raise DegenerateBackwardWeights(f"all backward weights vanished at t={t}")
            cdf = np.cumsum(np.exp(lw - mx), axis=1)
            u = (1.0 - rng.random(m)) * cdf[:, -1]
            idx = np.minimum(np.sum(cdf < u[:, None], axis=1), N - 1)
            trajs[:, t] = hist.particles[t, idx]
    return out


def pmmh_iteration(state: ChainState, model, obs, N, sigma, rng):
    """Particle marginal Metropolis-Hastings step with a Gaussian random-walk proposal.

    ``state.log_likelihood`` must hold the current likelihood estimate.
    Returns ``(new_state, accepted)``.
    """
    if not sigma > 0:
        raise ValueError("proposal standard deviation must be positive")
    theta = np.atleast_1d(state.theta)
    prop = theta + sigma * rng.standard_normal(theta.shape)
    lp_new = model.log_prior(prop)
    new = replace(state, iteration=state.iteration + 1)
    if not np.isfinite(lp_new):
        return new, False
    try:
        hist = run_smc(model.at(prop), obs, N, rng)
    except ParticleCollapse:
        return new, False
    log_alpha = hist.log_likelihood + lp_new - state.log_likelihood - model.log_prior(theta)
    if np.log(1.0 - rng.random()) < log_alpha:
        k = _final_draw(hist, rng)
        return replace(new, theta=prop, log_likelihood=hist.log_likelihood,
                       trajectory=trace_lineage(hist, k)), True
    return new, False


def mh_parameter_update(state: ChainState, model, obs, sigma, rng):
    """Random-walk MH step on theta targeting p(theta | x_{1:T}, y_{1:T}).

    Returns ``(new_state, accepted)``.
    """
    if not sigma > 0:
        raise ValueError("proposal standard deviation must be positive")
    theta = np.atleast_1d(state.theta)
    prop = theta + sigma * rng.standard_normal(theta.shape)
    lp_new = model.log_prior(prop)
    if not np.isfinite(lp_new):
        return state, False
    target_new = lp_new + log_gamma(model.at(prop), state.trajectory, obs)
    target_old = model.log_prior(theta) + log_gamma(model.at(theta), state.trajectory, obs)
    if np.log(1.0 - rng.random()) < target_new - target_old:
        return replace(state, theta=prop), True
    return state, False


KERNELS = {"pgas": pgas_iteration, "pgbs": pgbs_iteration, "pmmh": pmmh_iteration}


class ChainInterrupted(RuntimeError):
    """Raised when a chain fails; ``store`` holds the samples collected so far."""

    def __init__(self, message, store):
        super().__init__(message)
        self.store = store


@dataclass
class SampleStore:
    """Post-burn-in samples and diagnostics of one chain."""

    iterations: np.ndarray
    trajectories: np.ndarray  # (S, T, d_x)
    thetas: np.ndarray  # (S, d_theta)
    config: ChainConfig
    diagnostics: dict
    status: str = "complete"

    def __len__(self):
        return len(self.iterations)

    def to_csv(self, path, states=None):
        """One row per stored iteration: index, theta components, flattened trajectory.

        Every ``config.thin``-th stored sample is written.
        """
        traj = self.trajectories if states is None else states
        S, T, d = traj.shape
        rows = range(0, S, self.config.thin)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["iteration"] + [f"theta_{i}" for i in range(self.thetas.shape[1])]
            header += [f"x_{t}_{i}" for t in range(T) for i in range(d)]
            w.writerow(header)
            for r in rows:
                w.writerow([int(self.iterations[r])]
                           + [repr(float(v)) for v in self.thetas[r]]
                           + [repr(float(v)) for v in traj[r].ravel()])

    def manifest(self):
        return {"config": self.config.to_dict(), "samples": len(self), "status": self.status,
                "diagnostics": _jsonable(self.diagnostics)}

    def write_manifest(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def initial_state(model, obs, N, rng, theta=None):
    """Unconditional SMC followed by a lineage drawn proportionally to w_T."""
    if theta is not None:
        model = model.at(theta)
    hist = run_smc(model, obs, N, rng)
    traj = trace_lineage(hist, _final_draw(hist, rng))
    return ChainState(traj, np.atleast_1d(model.theta).copy(), 0, hist.log_likelihood)


def run_chain(model, obs, config: ChainConfig, rng=None, *, theta0=None, initial=None,
              exploit_markov=True):
    """Run ``config.R`` iterations of the selected kernel and keep the post-burn-in part.

    For PG kernels with ``config.theta_step`` set, every sweep is followed by
    one MH update of theta given the new trajectory. PMMH uses
    ``config.theta_step`` as its proposal scale.
    """
    obs = as_observations(obs, model.dim_y)
    T = obs.shape[0]
    if rng is None:
        rng = make_rng(config.seed)
    theta = np.atleast_1d(model.theta if theta0 is None else theta0).astype(float)
    if initial is None:
        state = initial_state(model, obs, config.N, rng, theta if theta.size else None)
    else:
        state = initial
    if config.kernel == "pmmh" and not np.isfinite(state.log_likelihood):
        raise ValueError("PMMH needs an initial likelihood estimate")
    S = config.R - config.burn_in
    trajs = np.empty((S, T, model.dim_x))
    thetas = np.empty((S, theta.size))
    iters = np.arange(config.burn_in, config.R)
    level_sum = 0.0
    level_count = 0
    sweep_levels = []
    moved = np.zeros(max(T - 1, 0))
    updated = np.zeros(T)
    mh_accepts = 0
    kernel_accepts = 0
    store = SampleStore(iters, trajs, thetas, config, {})
    i = 0
    try:
        for r in range(config.R):
            prev = state.trajectory
            cur_model = model.at(state.theta) if state.theta.size else model
            if config.kernel == "pmmh":
                state, acc = pmmh_iteration(state, model, obs, config.N, config.theta_step, rng)
                kernel_accepts += acc
            else:
                state, info = KERNELS[config.kernel](state, cur_model, obs, config, rng,
                                                      exploit_markov=exploit_markov)
                lv = info["levels"]
                if lv.size:
                    level_sum += float(lv.sum())
                    level_count += lv.size
                    sweep_levels.append(float(lv.mean()))
                if info["ancestor_moved"] is not None:
                    moved += info["ancestor_moved"]
                if config.theta_step is not None:
                    state, acc = mh_parameter_update(state, model, obs, config.theta_step, rng)
                    mh_accepts += acc
            updated += np.any(state.trajectory != prev, axis=1)
            if r >= config.burn_in:
                trajs[i] = state.trajectory
                thetas[i] = state.theta
                i += 1
    except Exception as exc:
        store = SampleStore(iters[:i], trajs[:i], thetas[:i], config, {}, status="partial")
        store.diagnostics = {"error": repr(exc), "iterations_run": r}
        raise ChainInterrupted(f"chain stopped at iteration {r}: {exc!r}", store) from exc
    R = config.R
    diag = {
        "update_rate": updated / R,
        "mean_level_per_draw": level_sum / level_count if level_count else None,
        "mean_level_per_sweep": float(np.mean(sweep_levels)) if sweep_levels else None,
    }
    if config.kernel == "pgas":
        diag["ancestor_move_rate"] = moved / R
    if config.kernel == "pmmh":
        diag["acceptance_rate"] = kernel_accepts / R
    elif config.theta_step is not None:
        diag["theta_acceptance_rate"] = mh_accepts / R
    store.diagnostics = diag
    return store
