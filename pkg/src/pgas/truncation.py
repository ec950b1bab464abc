"""Truncated backward weights and the adaptive truncation rule.

For a particle m with prefix x_{1:t}^m and a reference suffix x'_{t+1:T}, the
backward log-weight is log w_t^m + sum_{s=1}^{T-t} log h_s(m). Truncation keeps
the first p factors. The factors are produced one level at a time so that
level p+1 extends the partial sums of level p.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .smc import normalize_log_weights

__all__ = [
    "TruncationConfig",
    "TruncationTrace",
    "DegenerateBackwardWeights",
    "backward_factor_levels",
    "truncated_backward_logweights",
    "adaptive_backward_dist",
    "tv_distance",
    "kld",
    "kld_bound",
    "synthetic_decay_instance",
    "truncated_distribution",
    "truncation_kld",
    "truncation_klds",
]


class DegenerateBackwardWeights(RuntimeError):
    """All backward weights vanished."""


@dataclass(frozen=True)
class TruncationConfig:
    """How many future factors enter the backward weights.

    ``mode`` is ``"untruncated"``, ``"fixed"`` (level ``p``) or ``"adaptive"``
    (forgetting factor ``gamma_forget``, threshold ``tau``, optional cap ``p_max``).
    """

    mode: str = "untruncated"
    p: int | None = None
    gamma_forget: float = 0.1
    tau: float = 1e-2
    p_max: int | None = None

    def __post_init__(self):
        if self.mode not in ("untruncated", "fixed", "adaptive"):
            raise ValueError(f"unknown truncation mode {self.mode!r}")
        if self.mode == "fixed" and (self.p is None or self.p < 1):
            raise ValueError("fixed truncation needs p >= 1")
        if self.mode == "adaptive":
            if not 0.0 <= self.gamma_forget <= 1.0:
                raise ValueError("gamma_forget must lie in [0, 1]")
            if not 0.0 <= self.tau <= 1.0:
                raise ValueError("tau must lie in [0, 1]")
            if self.p_max is not None and self.p_max < 1:
                raise ValueError("p_max must be positive")

    @classmethod
    def fixed(cls, p):
        return cls("fixed", p=int(p))

    @classmethod
    def adaptive(cls, gamma_forget=0.1, tau=1e-2, p_max=None):
        return cls("adaptive", gamma_forget=gamma_forget, tau=tau, p_max=p_max)

    @classmethod
    def untruncated(cls):
        return cls("untruncated")

    def level(self, horizon):
        """Level used for a suffix of length ``horizon`` (maximum level for adaptive)."""
        if self.mode == "fixed":
            return min(self.p, horizon)
        if self.mode == "adaptive" and self.p_max is not None:
            return min(self.p_max, horizon)
        return horizon

    @property
    def label(self):
        if self.mode == "fixed":
            return f"p={self.p}"
        if self.mode == "adaptive":
            return "adaptive"
        return "untruncated"

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, data):
        if isinstance(data, str):
            data = {"mode": data}
        return cls(**data)


@dataclass
class TruncationTrace:
    """Distributions P_p for p = 0..level (row 0 is the forward-weight law),
    the TV distances eps_p and their moving average, for p = 1..level."""

    probabilities: np.ndarray
    eps: np.ndarray
    ewma: np.ndarray
    level: int
    extra: dict = field(default_factory=dict)

    def to_csv(self, path):
        N = self.probabilities.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level"] + [f"prob_{m}" for m in range(N)] + ["eps", "ewma", "stopped"])
            for p in range(self.probabilities.shape[0]):
                eps = repr(float(self.eps[p - 1])) if p else ""
                ewma = repr(float(self.ewma[p - 1])) if p else ""
                w.writerow([p] + [repr(float(v)) for v in self.probabilities[p]]
                           + [eps, ewma, int(p == self.level)])


def _broadcast_suffix(suffix, s, n):
    x = suffix[s]
    return x[None, :] if x.ndim == 1 else x


def backward_factor_levels(model, carry, suffix, obs, t, n, levels=None):
    """Yield log h_s for s = 1, 2, ... for ``n`` prefixes summarized by ``carry``.

    ``carry`` describes the prefixes after (0-based) time ``t``; ``suffix[s-1]``
    is the reference state at time t + s, of shape (d_x,) or (n, d_x). At most
    ``levels`` factors are produced (all of them by default).
    """
    for s in range(len(suffix) if levels is None else levels):
        tt = t + 1 + s
        log_f, log_g, carry = model.increment(carry, _broadcast_suffix(suffix, s, n), obs[tt], tt)
        yield log_f + log_g


def truncated_backward_logweights(model, carry, log_weights, suffix, obs, t, p):
    """log w_t^m + sum_{s=1}^{p} log h_s(m), unnormalized."""
    horizon = len(suffix)
    if not 1 <= p <= horizon:
        raise ValueError(f"truncation level {p} outside 1..{horizon}")
    out = np.asarray(log_weights, dtype=float)
    for lh in backward_factor_levels(model, carry, suffix, obs, t, len(out), p):
        out = out + lh
    out[np.isnan(out)] = -np.inf
    return out


def tv_distance(P, Q):
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape:
        raise ValueError("distributions must have the same support size")
    return float(0.5 * np.sum(np.abs(P - Q)))


def _normalized(logw):
    try:
        return normalize_log_weights(logw)
    except RuntimeError as exc:
        raise DegenerateBackwardWeights(str(exc)) from None


def adaptive_backward_dist(model, carry, log_weights, suffix, obs, t, gamma_forget=0.1,
                           tau=1e-2, p_max=None, keep_trace=False):
    """Backward distribution with the truncation level chosen on the fly.

    Starting from p = 1, eps_p = TV(P_p, P_{p-1}) with P_0 proportional to the
    forward weights, and the moving average e_p = gamma e_{p-1} + (1 - gamma) eps_p
    (e_1 = eps_1). Stops at the first p with e_p < tau, or at the cap.
    Returns ``(probabilities, level, trace_or_None)``.
    """
    horizon = len(suffix)
    cap = horizon if p_max is None else min(p_max, horizon)
    logw = np.array(log_weights, dtype=float)
    prev = _normalized(logw)
    probs_hist = [prev] if keep_trace else None
    eps_hist, ewma_hist = [], []
    ewma = 0.0
    P = prev
    p = 0
    for p, lh in enumerate(backward_factor_levels(model, carry, suffix, obs, t, len(logw), cap), 1):
        logw += lh
        m = logw.max()
        if math.isfinite(m):
            P = np.exp(logw - m)
            P /= P.sum()
        else:
            P = _normalized(np.where(np.isnan(logw), -np.inf, logw))
        eps = 0.5 * float(np.abs(P - prev).sum())
        ewma = eps if p == 1 else gamma_forget * ewma + (1.0 - gamma_forget) * eps
        if keep_trace:
            probs_hist.append(P)
            eps_hist.append(eps)
            ewma_hist.append(ewma)
        if ewma < tau:
            break
        prev = P
    trace = None
    if keep_trace:
        trace = TruncationTrace(np.array(probs_hist), np.array(eps_hist), np.array(ewma_hist), p)
    return P, p, trace


def kld(P, Q):
    """Kullback-Leibler divergence sum_m P(m) log(P(m)/Q(m)) with 0 log 0 = 0."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape:
        raise ValueError("distributions must have the same support size")
    support = P > 0
    if np.any(Q[support] <= 0):
        raise ValueError("Q must be positive wherever P is")
    p, q = P[support], Q[support]
    return float(max(0.0, np.sum(p * (np.log(p) - np.log(q)))))


def kld_bound(A, c, p, M):
    """A (e^{-c(p+1)} - e^{-c(M+1)}) / (1 - e^{-c}); ``M`` may be ``math.inf``."""
    if c <= 0:
        raise ValueError("c must be positive")
    if A < 0:
        raise ValueError("A must be nonnegative")
    if p > M:
        raise ValueError("p cannot exceed M")
    tail = 0.0 if math.isinf(M) else math.exp(-c * (M + 1))
    return A * (math.exp(-c * (p + 1)) - tail) / -math.expm1(-c)


def synthetic_decay_instance(N, M, A, c, rng):
    """Forward log-weights and log-factors with h_s(k) = 1 + a_k e^{-cs}, a_k in [0, A].

    Such factors satisfy max_{k,l} h_s(k)/h_s(l) - 1 <= A e^{-cs}. Returns
    ``(log_w, log_h)`` with ``log_h`` of shape (M, N).
    """
    log_w = rng.normal(size=N)
    a = rng.uniform(0.0, A, size=N)
    s = np.arange(1, M + 1)[:, None]
    log_h = np.log1p(a[None, :] * np.exp(-c * s))
    return log_w, log_h


def truncated_distribution(log_w, log_h, p):
    """Normalized law of log_w + sum of the first ``p`` rows of ``log_h``."""
    return normalize_log_weights(log_w + np.sum(log_h[:p], axis=0))


def _chi(x):
    """(x - 1) expm1(x) + x without cancellation near zero."""
    out = (x - 1.0) * np.expm1(x) + x
    small = np.abs(x) < 0.1
    if small.any():
        xs = x[small]
        term, acc = xs * xs / 2.0, np.zeros_like(xs)
        for k in range(2, 16):
            acc += (k - 1) * term
            term = term * xs / (k + 1)
        out[small] = acc
    return out


def _psi(u):
    """log1p(u) - u / (1 + u) without cancellation near zero (elementwise)."""
    u = np.asarray(u, dtype=float)
    out = np.array(np.log1p(u) - u / (1.0 + u))
    small = np.abs(u) < 0.1
    if small.any():
        us = u[small]
        out[small] = sum((-1) ** k * (k - 1) / k * us ** k for k in range(2, 30))
    return out


def _kld_from_tail(base, tail):
    x = tail - np.sum(base * tail, axis=-1, keepdims=True)
    u = np.sum(base * np.expm1(x), axis=-1)
    return np.maximum(0.0, np.sum(base * _chi(x), axis=-1) / (1.0 + u) - _psi(u))


def truncation_kld(log_w, log_h, p):
    """KLD(P || P_p) between the full and the level-``p`` law of :func:`truncated_distribution`.

    With the tail d(k) = sum_{s>p} log h_s(k) centred so that E_{P_p}[d] = 0
    and u = E_{P_p}[expm1(d)], the divergence equals
    E_{P_p}[(d - 1) expm1(d) + d] / (1 + u) - (log1p(u) - u / (1 + u)).
    Both pieces are evaluated without cancellation, so the result keeps
    relative accuracy even when the two laws agree to machine precision.
    """
    log_h = np.asarray(log_h, dtype=float)
    base = truncated_distribution(log_w, log_h, p)
    return float(_kld_from_tail(base, np.sum(log_h[p:], axis=0)))


def truncation_klds(log_w, log_h):
    """:func:`truncation_kld` for every level p = 0..M at once, shape (M + 1,)."""
    log_h = np.asarray(log_h, dtype=float)
    N = log_h.shape[1]
    zero = np.zeros((1, N))
    prefix = np.vstack([zero, np.cumsum(log_h, axis=0)])
    tail = np.vstack([np.cumsum(log_h[::-1], axis=0)[::-1], zero])
    logs = np.asarray(log_w, dtype=float) + prefix
    base = np.exp(logs - logs.max(axis=1, keepdims=True))
    base /= base.sum(axis=1, keepdims=True)
    return _kld_from_tail(base, tail)
