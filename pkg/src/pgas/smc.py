"""Auxiliary SMC: propagation, weighting, lineage bookkeeping and likelihood estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import StateSpaceModel, as_observations

__all__ = [
    "ParticleCollapse",
    "ParticleSlice",
    "SmcHistory",
    "normalize_log_weights",
    "log_mean_exp",
    "sample_categorical",
    "sample_ancestors",
    "run_smc",
    "lineage_indices",
    "trace_lineage",
]


class ParticleCollapse(RuntimeError):
    """Every particle weight vanished."""


def _logsumexp(logw):
    m = np.max(logw)
    if not np.isfinite(m):
        return m
    return m + np.log(np.sum(np.exp(logw - m)))


def log_mean_exp(logw):
    return _logsumexp(logw) - np.log(len(logw))


def normalize_log_weights(logw):
    """Normalized linear-domain probabilities from log-weights (max subtracted first)."""
    logw = np.asarray(logw, dtype=float)
    m = logw.max()  # NaN propagates through max
    if not np.isfinite(m):
        raise ParticleCollapse("all weights are zero or undefined")
    w = np.exp(logw - m)
    w /= w.sum()
    return w


def sample_categorical(logw, n, rng):
    """``n`` i.i.d. draws from the categorical law proportional to exp(logw).

    Inverse-CDF search with a sorted batch of uniforms on (0, 1]; a uniform
    landing exactly on a boundary goes to the lower index and zero-weight
    entries are never selected.
    """
    logw = np.asarray(logw, dtype=float)
    m = logw.max()
    if not np.isfinite(m):
        raise ParticleCollapse("all weights are zero or undefined")
    cdf = np.exp(logw - m).cumsum()
    u = 1.0 - rng.random(n)
    if n > 1:
        u.sort()
    return np.searchsorted(cdf, u * cdf[-1], side="left")


def sample_ancestors(particle_slice, n, rng):
    """Ancestor indices drawn proportionally to w_{t-1} nu_{t-1}."""
    return sample_categorical(particle_slice.log_weights + particle_slice.log_adjustments, n, rng)


@dataclass
class ParticleSlice:
    particles: np.ndarray  # (N, d_x)
    log_weights: np.ndarray  # (N,)
    ancestors: np.ndarray  # (N,), -1 at the first step
    log_adjustments: np.ndarray  # (N,)

    def __post_init__(self):
        n = self.particles.shape[0]
        if n < 1:
            raise ValueError("a particle slice needs at least one particle")
        if not (self.log_weights.shape == self.ancestors.shape == self.log_adjustments.shape == (n,)):
            raise ValueError("slice arrays must all have length N")


@dataclass
class SmcHistory:
    """Full particle history of one SMC sweep (0-based time and particle indices)."""

    particles: np.ndarray  # (T, N, d_x)
    log_weights: np.ndarray  # (T, N)
    ancestors: np.ndarray  # (T, N); row 0 is -1
    log_adjustments: np.ndarray  # (T, N)
    log_normalizers: np.ndarray  # (T,)
    carries: list | None = None  # carries after each step, when kept
    levels: np.ndarray | None = None  # truncation level used for the conditioned ancestor
    reference_slots: np.ndarray | None = None

    @property
    def T(self):
        return self.particles.shape[0]

    @property
    def N(self):
        return self.particles.shape[1]

    @property
    def log_likelihood(self):
        """log of the unbiased estimate of p(y_{1:T})."""
        return float(np.sum(self.log_normalizers))

    def slice(self, t):
        return ParticleSlice(self.particles[t], self.log_weights[t], self.ancestors[t],
                             self.log_adjustments[t])


def lineage_indices(ancestors, k):
    """Indices b_{1:T} with b_T = k and b_t = a_{t+1}^{b_{t+1}}."""
    ancestors = np.asarray(ancestors)
    T, N = ancestors.shape
    if not 0 <= k < N:
        raise IndexError(f"particle index {k} outside 0..{N - 1}")
    b = np.empty(T, dtype=np.int64)
    b[-1] = k
    for t in range(T - 1, 0, -1):
        b[t - 1] = ancestors[t, b[t]]
    return b


def trace_lineage(history: SmcHistory, k):
    """The ancestral path (x_1^{b_1}, ..., x_T^{b_T}) of final particle ``k``."""
    b = lineage_indices(history.ancestors, k)
    return history.particles[np.arange(history.T), b]


def _weights(model, carry, x, y, t, log_f, log_g, log_nu_anc):
    if model.bootstrap:
        logw = log_g
    else:
        logw = log_f + log_g - model.proposal_logpdf(carry, x, t, y)
    if log_nu_anc is not None:
        logw = logw - log_nu_anc
    return np.where(np.isnan(logw), -np.inf, logw)


def run_smc(model: StateSpaceModel, obs, N, rng, *, keep_carries=False):
    """Auxiliary SMC with multinomial resampling at every step.

    The per-step log normalizer is log(sum_m w_t^m / N), corrected by
    log(sum_m w_{t-1}^m nu_{t-1}^m / sum_m w_{t-1}^m) when adjustment
    multipliers are in use, so that their sum estimates log p(y_{1:T}).
    """
    obs = as_observations(obs, model.dim_y)
    if N < 1:
        raise ValueError("N must be positive")
    T = obs.shape[0]
    dx = model.dim_x
    X = np.empty((T, N, dx))
    LW = np.empty((T, N))
    A = np.full((T, N), -1, dtype=np.int64)
    LNU = np.zeros((T, N))
    LZ = np.empty(T)
    carries = [] if keep_carries else None

    carry = model.init_carry(N)
    x = model.sample_proposal(carry, 0, obs[0], rng)
    log_f, log_g, new_carry = model.increment(carry, x, obs[0], 0)
    logw = _weights(model, carry, x, obs[0], 0, log_f, log_g, None)
    carry = new_carry
    X[0], LW[0] = x, logw
    LZ[0] = log_mean_exp(logw)
    if not np.isfinite(LZ[0]):
        raise ParticleCollapse("all weights vanished at t=0")
    if keep_carries:
        carries.append(carry)
    for t in range(1, T):
        log_nu = model.log_adjustment(carry, t - 1, obs[t])
        if log_nu is None:
            a = sample_categorical(logw, N, rng)
            corr = 0.0
            log_nu_anc = None
        else:
            LNU[t - 1] = log_nu
            a = sample_categorical(logw + log_nu, N, rng)
            corr = _logsumexp(logw + log_nu) - _logsumexp(logw)
            log_nu_anc = log_nu[a]
        carry = model.take(carry, a)
        x = model.sample_proposal(carry, t, obs[t], rng)
        log_f, log_g, new_carry = model.increment(carry, x, obs[t], t)
        logw = _weights(model, carry, x, obs[t], t, log_f, log_g, log_nu_anc)
        carry = new_carry
        X[t], LW[t], A[t] = x, logw, a
        LZ[t] = log_mean_exp(logw) + corr
        if not np.isfinite(LZ[t]):
            raise ParticleCollapse(f"all weights vanished at t={t}")
        if keep_carries:
            carries.append(carry)
    return SmcHistory(X, LW, A, LNU, LZ, carries)
