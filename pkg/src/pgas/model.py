"""Model interface consumed by every sampler.

A model describes a (possibly non-Markovian) state-space model through the
sequence of unnormalized targets gamma_t(x_{1:t}) = p(x_{1:t}, y_{1:t}).
Samplers never see whole prefixes. Each particle instead carries a *carry*:
the model's sufficient statistic of the prefix x_{1:t} and y_{1:t} (the
previous state for a Markovian model, a conditional Kalman mean for a
Rao-Blackwellized one, a reconstructed full state for a degenerate one).
All model methods are vectorized over a leading particle axis and work with
0-based time indices.

The module-level functions expose the same model through explicit
trajectories. They are slower and exist for testing and for callers who
want densities of given paths.
"""

from __future__ import annotations

import numpy as np


class ModelError(ValueError):
    """Invalid input to a model evaluation."""


class DimensionError(ModelError):
    pass


class StateSpaceModel:
    """Base class for targets gamma_t(x_{1:t}) = p(x_{1:t}, y_{1:t} | theta).

    Subclasses implement :meth:`init_carry`, :meth:`sample_transition`,
    :meth:`increment` and, for simulation, :meth:`sample_observation`.
    The default proposal is the transition kernel (bootstrap) and the default
    adjustment multipliers are one.
    """

    dim_x: int
    dim_y: int
    #: True when h_s does not depend on the prefix for s >= 2.
    markov = False
    #: Proposal equals the transition kernel, so W_t reduces to g(y_t | x_{1:t}).
    bootstrap = True

    theta = np.zeros(0)

    def init_carry(self, n):
        raise NotImplementedError

    def take(self, carry, idx):
        """Select carries of particles ``idx`` (resampling)."""
        if isinstance(carry, tuple):
            return tuple(c[idx] for c in carry)
        return carry[idx]

    def sample_transition(self, carry, t, rng):
        """Draw x_t ~ f(x_t | x_{1:t-1}); the prior at ``t == 0``."""
        raise NotImplementedError

    def increment(self, carry, x, y, t):
        """Return ``(log_f, log_g, new_carry)`` for appending ``x`` and ``y`` at time ``t``.

        ``log_f + log_g`` is the increment log gamma_t - log gamma_{t-1}.
        ``x`` has shape (n, d_x), or (1, d_x) to append one common state to
        every carry; outputs always have n rows.
        """
        raise NotImplementedError

    def sample_observation(self, carry, x, t, rng):
        raise NotImplementedError

    # proposal and auxiliary weights; override together with ``bootstrap = False``
    def sample_proposal(self, carry, t, y, rng):
        return self.sample_transition(carry, t, rng)

    def proposal_logpdf(self, carry, x, t, y):
        log_f, _, _ = self.increment(carry, x, y, t)
        return log_f

    def log_adjustment(self, carry, t, y_next):
        """log nu_t for carries after time ``t``; ``None`` means nu = 1."""
        return None

    # parameters
    def log_prior(self, theta):
        return 0.0

    def at(self, theta):
        """Copy of the model with parameter ``theta``."""
        if np.size(theta) == 0:
            return self
        raise NotImplementedError(f"{type(self).__name__} has no parameters")

    def states(self, trajectory, obs=None, thetas=None):
        """Trajectory (or batch of trajectories) in reporting coordinates (default: unchanged)."""
        return np.asarray(trajectory)


# -- trajectory helpers -----------------------------------------------------------


def as_trajectory(states, dim_x=None):
    traj = np.asarray(states, dtype=float)
    if traj.ndim == 1:
        traj = traj[:, None] if dim_x in (None, 1) else traj.reshape(-1, dim_x)
    if traj.ndim != 2 or traj.shape[0] < 1 or traj.shape[1] < 1:
        raise DimensionError(f"a trajectory needs shape (t >= 1, d_x >= 1), got {traj.shape}")
    if dim_x is not None and traj.shape[1] != dim_x:
        raise DimensionError(f"state dimension {traj.shape[1]} != model dimension {dim_x}")
    if not np.all(np.isfinite(traj)):
        raise ModelError("trajectory entries must be finite")
    return traj


def as_observations(obs, dim_y=None):
    y = np.asarray(obs, dtype=float)
    if y.ndim == 1:
        y = y[:, None] if dim_y in (None, 1) else y.reshape(-1, dim_y)
    if y.ndim != 2 or y.shape[0] < 1:
        raise DimensionError(f"observations need shape (T >= 1, d_y), got {y.shape}")
    if dim_y is not None and y.shape[1] != dim_y:
        raise DimensionError(f"observation dimension {y.shape[1]} != model dimension {dim_y}")
    if not np.all(np.isfinite(y)):
        raise ModelError("observations must be finite")
    return y


def _checked(model, traj, obs):
    traj = as_trajectory(traj, model.dim_x)
    obs = as_observations(obs, model.dim_y)
    if traj.shape[0] > obs.shape[0]:
        raise DimensionError(f"trajectory length {traj.shape[0]} exceeds horizon {obs.shape[0]}")
    return traj, obs


def fold(model, traj, obs, start=0, carry=None):
    """Run the model along ``traj`` (placed at times ``start, start+1, ...``).

    Returns ``(log_f, log_g, carry)`` with per-step arrays for a single particle.
    """
    n = traj.shape[0]
    if carry is None:
        carry = model.init_carry(1)
    lf = np.empty(n)
    lg = np.empty(n)
    for i in range(n):
        f, g, carry = model.increment(carry, traj[i][None, :], obs[start + i], start + i)
        lf[i], lg[i] = f[0], g[0]
    return lf, lg, carry


def log_gamma_increments(model, traj, obs):
    """Per-step increments log gamma_s - log gamma_{s-1}, s = 1..t."""
    traj, obs = _checked(model, traj, obs)
    lf, lg, _ = fold(model, traj, obs)
    return lf + lg


def log_gamma(model, traj, obs):
    """log gamma_t(x_{1:t}) = log p(x_{1:t}, y_{1:t}); t is the trajectory length."""
    return float(np.sum(log_gamma_increments(model, traj, obs)))


def prefix_carry(model, prefix, obs):
    prefix, obs = _checked(model, prefix, obs)
    return fold(model, prefix, obs)[2]


def log_h_factors(model, prefix, suffix, obs):
    """All factors log h_s, s = 1..len(suffix), linking ``prefix`` to ``suffix``.

    h_s = g(y_{t+s} | prefix, suffix_{1:s}) f(suffix_s | prefix, suffix_{1:s-1}),
    so that their sum is log gamma_{t+k}(prefix, suffix) - log gamma_t(prefix).
    """
    prefix, obs = _checked(model, prefix, obs)
    suffix = as_trajectory(suffix, model.dim_x)
    t = prefix.shape[0]
    if t + suffix.shape[0] > obs.shape[0]:
        raise DimensionError("prefix and suffix exceed the horizon")
    carry = fold(model, prefix, obs)[2]
    lf, lg, _ = fold(model, suffix, obs, start=t, carry=carry)
    return lf + lg


def log_h_factor(model, s, prefix, suffix, obs):
    """The single factor log h_s (``s`` is 1-based, 1 <= s <= len(suffix))."""
    suffix = as_trajectory(suffix, model.dim_x)
    if not 1 <= s <= suffix.shape[0]:
        raise ModelError(f"s={s} outside 1..{suffix.shape[0]}")
    return float(log_h_factors(model, prefix, suffix[:s], obs)[s - 1])


def sample_transition(model, prefix, obs, rng):
    """Draw x_{t+1} ~ R_{t+1}(. | x_{1:t}) for a prefix of length t."""
    prefix, obs = _checked(model, prefix, obs)
    t = prefix.shape[0]
    if t >= obs.shape[0]:
        raise ModelError("prefix already spans the horizon")
    carry = fold(model, prefix, obs)[2]
    return model.sample_proposal(carry, t, obs[t], rng)[0]


def transition_log_density(model, prefix, x, obs):
    """log R_{t+1}(x | x_{1:t}) (the transition density under the bootstrap proposal)."""
    prefix, obs = _checked(model, prefix, obs)
    t = prefix.shape[0]
    carry = fold(model, prefix, obs)[2]
    x = np.asarray(x, dtype=float).reshape(1, model.dim_x)
    return float(model.proposal_logpdf(carry, x, t, obs[t])[0])


def log_weight_function(model, prefix, x, obs):
    """log W_t(x_{1:t}) for the path (prefix, x); ``prefix`` may be ``None`` at t = 1."""
    obs = as_observations(obs, model.dim_y)
    x = np.asarray(x, dtype=float).reshape(1, model.dim_x)
    if prefix is None:
        t, carry, log_nu = 0, model.init_carry(1), 0.0
    else:
        prefix, obs = _checked(model, prefix, obs)
        t = prefix.shape[0]
        carry = fold(model, prefix, obs)[2]
        nu = model.log_adjustment(carry, t - 1, obs[t])
        log_nu = 0.0 if nu is None else float(nu[0])
    log_f, log_g, _ = model.increment(carry, x, obs[t], t)
    if model.bootstrap:
        return float(log_g[0]) - log_nu
    log_r = model.proposal_logpdf(carry, x, t, obs[t])
    return float(log_f[0] + log_g[0] - log_r[0]) - log_nu
