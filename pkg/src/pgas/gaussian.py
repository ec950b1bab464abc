"""Exact inference for linear Gaussian state-space models.

The model is

    xi_{t+1} = A xi_t + G w_t,   w_t ~ N(0, Q)
    y_t      = C xi_t + e_t,     e_t ~ N(0, R)
    xi_1     ~ N(mu0, Sigma0)

This module provides the Kalman filter, a modified Bryson-Frazier smoother
(used as ground truth for the samplers), exact joint smoothing draws, the
conditional Kalman recursion used to marginalize part of the state, and a
generator of random stable systems.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


class KalmanError(np.linalg.LinAlgError):
    """Raised when an innovation covariance is not positive definite."""


def _sym(m):
    return 0.5 * (m + m.T)


def _check_psd(name, m, tol=1e-10):
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=tol, rtol=0.0):
        raise ValueError(f"{name} is not symmetric")
    if m.size and np.linalg.eigvalsh(_sym(m)).min() < -tol * max(1.0, np.abs(m).max()):
        raise ValueError(f"{name} is not positive semidefinite")


def _chol(m, what="matrix"):
    try:
        return np.linalg.cholesky(_sym(m))
    except np.linalg.LinAlgError as exc:
        raise KalmanError(f"{what} is not positive definite") from exc


def mvn_logpdf(x, mean, cov):
    """Log-density of N(mean, cov) at the rows of ``x`` (shape (..., d))."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    if d == 0:
        return np.zeros(x.shape[:-1])
    L = _chol(np.atleast_2d(cov), "covariance")
    r = np.linalg.solve(L, (x - mean).reshape(-1, d).T)
    quad = np.sum(r * r, axis=0).reshape(x.shape[:-1])
    return -0.5 * (d * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + quad)


def sample_mvn(mean, cov, rng, size=None):
    """Draw from N(mean, cov) for a possibly singular PSD covariance."""
    mean = np.asarray(mean, dtype=float)
    d = mean.shape[-1]
    vals, vecs = np.linalg.eigh(_sym(np.atleast_2d(cov)))
    # eigenvalues at roundoff level belong to the null space
    vals = np.where(vals > d * np.finfo(float).eps * max(vals.max(), 0.0), vals, 0.0)
    root = vecs * np.sqrt(vals)
    shape = (d,) if size is None else (size, d)
    z = rng.standard_normal(shape)
    return mean + z @ root.T


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class Lgssm:
    """Linear Gaussian state-space model with possibly singular process noise."""

    A: np.ndarray
    G: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = A.shape[0]
        G = np.asarray(self.G, dtype=float).reshape(d, -1)
        q = G.shape[1]
        C = np.asarray(self.C, dtype=float).reshape(-1, d)
        dy = C.shape[0]
        Q = np.asarray(self.Q, dtype=float).reshape(q, q)
        R = np.asarray(self.R, dtype=float).reshape(dy, dy)
        mu0 = np.asarray(self.mu0, dtype=float).reshape(d)
        Sigma0 = np.asarray(self.Sigma0, dtype=float).reshape(d, d)
        if A.shape != (d, d):
            raise ValueError(f"A must be square, got {A.shape}")
        _check_psd("Q", Q)
        _check_psd("Sigma0", Sigma0)
        _check_psd("R", R)
        if dy and np.linalg.eigvalsh(_sym(R)).min() <= 0:
            raise ValueError("R must be positive definite")
        for name, val in zip("A G C Q R mu0 Sigma0".split(), (A, G, C, Q, R, mu0, Sigma0)):
            object.__setattr__(self, name, val)

    @property
    def dim_x(self):
        return self.A.shape[0]

    @property
    def dim_y(self):
        return self.C.shape[0]

    @property
    def process_cov(self):
        return _sym(self.G @ self.Q @ self.G.T)

    def transformed(self, U):
        """Same model expressed in the coordinates ``U.T @ xi`` (``U`` orthogonal)."""
        U = np.asarray(U, dtype=float)
        if not np.allclose(U.T @ U, np.eye(U.shape[0]), atol=1e-10):
            raise ValueError("basis must be orthogonal")
        return Lgssm(
            A=U.T @ self.A @ U,
            G=U.T @ self.G,
            C=self.C @ U,
            Q=self.Q,
            R=self.R,
            mu0=U.T @ self.mu0,
            Sigma0=_sym(U.T @ self.Sigma0 @ U),
        )

    def without_observations(self):
        d = self.dim_x
        return Lgssm(self.A, self.G, np.zeros((0, d)), self.Q, np.zeros((0, 0)), self.mu0, self.Sigma0)

    def simulate(self, T, rng):
        """Return ``(states, observations)`` with shapes (T, d) and (T, d_y)."""
        if T < 1:
            raise ValueError("T must be positive")
        d = self.dim_x
        xs = np.empty((T, d))
        ys = np.empty((T, self.dim_y))
        xs[0] = sample_mvn(self.mu0, self.Sigma0, rng)
        for t in range(1, T):
            w = sample_mvn(np.zeros(self.Q.shape[0]), self.Q, rng)
            xs[t] = self.A @ xs[t - 1] + self.G @ w
        for t in range(T):
            ys[t] = self.C @ xs[t] + sample_mvn(np.zeros(self.dim_y), self.R, rng)
        return xs, ys

    # -- serialization -------------------------------------------------
    def to_dict(self):
        def enc(m):
            m = np.atleast_2d(m)
            return {"rows": m.shape[0], "cols": m.shape[1], "data": m.ravel().tolist()}

        return {
            "A": enc(self.A),
            "G": enc(self.G),
            "C": enc(self.C),
            "Q": enc(self.Q),
            "R": enc(self.R),
            "mu0": enc(self.mu0[None, :]),
            "Sigma0": enc(self.Sigma0),
        }

    @classmethod
    def from_dict(cls, data):
        def dec(entry):
            return np.array(entry["data"], dtype=float).reshape(entry["rows"], entry["cols"])

        return cls(
            A=dec(data["A"]),
            G=dec(data["G"]),
            C=dec(data["C"]),
            Q=dec(data["Q"]),
            R=dec(data["R"]),
            mu0=dec(data["mu0"]).ravel(),
            Sigma0=dec(data["Sigma0"]),
        )

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class KalmanResult:
    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    log_likelihoods: np.ndarray
    innovations: list
    gains: list

    @property
    def log_likelihood(self):
        return float(np.sum(self.log_likelihoods))

    def belief(self, t):
        return GaussianBelief(self.filtered_means[t], self.filtered_covs[t])


def _check_obs(model, obs):
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None] if model.dim_y == 1 else obs.reshape(-1, model.dim_y)
    if obs.ndim != 2 or obs.shape[1] != model.dim_y:
        raise ValueError(f"observations must have shape (T, {model.dim_y}), got {obs.shape}")
    if obs.shape[0] < 1:
        raise ValueError("need at least one observation")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observations must be finite")
    return obs


def kalman_filter(model: Lgssm, obs) -> KalmanResult:
    """Kalman filter with Joseph-form covariance updates.

    Returns predicted and filtered moments for every time step together with
    the per-step predictive log-densities log N(y_t; C m_t|t-1, S_t).
    """
    obs = _check_obs(model, obs)
    T, d = obs.shape[0], model.dim_x
    A, C, R = model.A, model.C, model.R
    W = model.process_cov
    I = np.eye(d)
    pm = np.empty((T, d))
    pc = np.empty((T, d, d))
    fm = np.empty((T, d))
    fc = np.empty((T, d, d))
    ll = np.zeros(T)
    innovations, gains = [], []
    m, P = model.mu0.copy(), model.Sigma0.copy()
    for t in range(T):
        if t > 0:
            m = A @ fm[t - 1]
            P = _sym(A @ fc[t - 1] @ A.T + W)
        pm[t], pc[t] = m, P
        if model.dim_y:
            S = _sym(C @ P @ C.T + R)
            L = _chol(S, f"innovation covariance at t={t}")
            v = obs[t] - C @ m
            K = np.linalg.solve(S, C @ P).T
            r = np.linalg.solve(L, v)
            ll[t] = -0.5 * (len(v) * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + r @ r)
            IKC = I - K @ C
            m = m + K @ v
            P = _sym(IKC @ P @ IKC.T + K @ R @ K.T)
            innovations.append((v, S))
            gains.append(K)
        else:
            innovations.append((np.zeros(0), np.zeros((0, 0))))
            gains.append(np.zeros((d, 0)))
        fm[t], fc[t] = m, P
    return KalmanResult(pm, pc, fm, fc, ll, innovations, gains)


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray
    filter: KalmanResult


def exact_smoother(model: Lgssm, obs) -> SmootherResult:
    """Marginal smoothing moments p(xi_t | y_{1:T}) by the modified Bryson-Frazier recursion.

    The backward pass propagates the adjoint variables (lambda, Lambda) and
    never inverts a predicted covariance, so singular process noise is fine.
    """
    kf = kalman_filter(model, obs)
    T, d = kf.filtered_means.shape
    A, C = model.A, model.C
    I = np.eye(d)
    means = np.empty((T, d))
    covs = np.empty((T, d, d))
    lam_hat = np.zeros(d)
    Lam_hat = np.zeros((d, d))
    for t in range(T - 1, -1, -1):
        P = kf.filtered_covs[t]
        means[t] = kf.filtered_means[t] - P @ lam_hat
        covs[t] = _sym(P - P @ Lam_hat @ P)
        if t == 0:
            break
        v, S = kf.innovations[t]
        K = kf.gains[t]
        Chat = I - K @ C
        if model.dim_y:
            CtSinv = np.linalg.solve(S, C).T
            Lam_tilde = CtSinv @ C + Chat.T @ Lam_hat @ Chat
            lam_tilde = -CtSinv @ v + Chat.T @ lam_hat
        else:
            Lam_tilde, lam_tilde = Lam_hat, lam_hat
        lam_hat = A.T @ lam_tilde
        Lam_hat = _sym(A.T @ Lam_tilde @ A)
    return SmootherResult(means, covs, kf)


def sample_joint_smoothing(model: Lgssm, obs, rng, kf: KalmanResult | None = None):
    """Exact draw of xi_{1:T} from p(xi_{1:T} | y_{1:T}) by backward conditioning."""
    if kf is None:
        kf = kalman_filter(model, obs)
    T, d = kf.filtered_means.shape
    A, W = model.A, model.process_cov
    out = np.empty((T, d))
    out[-1] = sample_mvn(kf.filtered_means[-1], kf.filtered_covs[-1], rng)
    for t in range(T - 2, -1, -1):
        m, P = kf.filtered_means[t], kf.filtered_covs[t]
        Ppred = _sym(A @ P @ A.T + W)
        J = P @ A.T @ np.linalg.pinv(Ppred, rcond=1e-12, hermitian=True)
        mean = m + J @ (out[t + 1] - A @ m)
        cov = _sym(P - J @ A @ P)
        out[t] = sample_mvn(mean, cov, rng)
    return out


# -- conditional (Rao-Blackwellized) recursion -------------------------------


class PartitionedLgssm:
    """An Lgssm split as xi = U (x; z) with x kept as a sampled state and z marginalized.

    Given a fixed trajectory x_{1:t}, the z-process is tracked by a Kalman
    filter whose covariances do not depend on the values of x. The gains and
    covariances are therefore shared by all trajectories and are computed once
    per time step by :meth:`schedule`; only the means are trajectory specific.
    """

    def __init__(self, model: Lgssm, dim_x, basis=None):
        d = model.dim_x
        if basis is None:
            basis = np.eye(d)
        if not 1 <= dim_x <= d:
            raise ValueError(f"dim_x must lie in [1, {d}]")
        self.base = model
        self.basis = np.asarray(basis, dtype=float)
        self.model = model.transformed(self.basis)
        self.dx = dim_x
        self.dz = d - dim_x
        m = self.model
        ix, iz = slice(0, dim_x), slice(dim_x, d)
        W = m.process_cov
        self.Axx, self.Axz = m.A[ix, ix], m.A[ix, iz]
        self.Azx, self.Azz = m.A[iz, ix], m.A[iz, iz]
        self.Wxx, self.Wxz, self.Wzz = W[ix, ix], W[ix, iz], W[iz, iz]
        self.Cx, self.Cz = m.C[:, ix], m.C[:, iz]
        self.R = m.R
        self.mux, self.muz = m.mu0[ix], m.mu0[iz]
        self.Sxx0, self.Sxz0, self.Szz0 = m.Sigma0[ix, ix], m.Sigma0[ix, iz], m.Sigma0[iz, iz]
        self._steps = []

    @property
    def dim_y(self):
        return self.model.dim_y

    def reconstruct(self, x, z):
        return np.concatenate([x, z], axis=-1) @ self.basis.T

    def coordinates(self, xi):
        return xi @ self.basis

    def _next_step(self, Pf_prev):
        """Covariance-side quantities of one conditional step (see conditional_stats_step)."""
        if Pf_prev is None:
            Sxx, Sxz, Szz = self.Sxx0, self.Sxz0, self.Szz0
        else:
            Sxx = _sym(self.Axz @ Pf_prev @ self.Axz.T + self.Wxx)
            Sxz = self.Axz @ Pf_prev @ self.Azz.T + self.Wxz
            Szz = _sym(self.Azz @ Pf_prev @ self.Azz.T + self.Wzz)
        Lx = _chol(Sxx, "conditional state covariance")
        Kx = np.linalg.solve(Sxx, Sxz).T
        Ppred = _sym(Szz - Kx @ Sxx @ Kx.T)
        dy = self.dim_y
        if dy:
            S = _sym(self.Cz @ Ppred @ self.Cz.T + self.R)
            Ly = _chol(S, "innovation covariance")
            Ky = np.linalg.solve(S, self.Cz @ Ppred).T
            IKC = np.eye(self.dz) - Ky @ self.Cz
            Pf = _sym(IKC @ Ppred @ IKC.T + Ky @ self.R @ Ky.T)
            Ly_inv = np.linalg.inv(Ly)
            logdet_y = 2.0 * np.sum(np.log(np.diag(Ly)))
        else:
            Ky = np.zeros((self.dz, 0))
            Pf = Ppred
            Ly = Ly_inv = np.zeros((0, 0))
            logdet_y = 0.0
        Lx_inv = np.linalg.inv(Lx)
        return {
            "Sxx": Sxx,
            "Lx": Lx,
            "Lx_inv": Lx_inv,
            "logdet_x": 2.0 * np.sum(np.log(np.diag(Lx))),
            "Kx": Kx,
            "Ppred": Ppred,
            "Ky": Ky,
            "Ly": Ly,
            "Ly_inv": Ly_inv,
            "logdet_y": logdet_y,
            "Pf": Pf,
        }

    def schedule(self, t):
        """Shared covariances and gains for (0-based) step ``t``."""
        while len(self._steps) <= t:
            prev = self._steps[-1]["Pf"] if self._steps else None
            self._steps.append(self._next_step(prev))
        return self._steps[t]


def conditional_stats_step(part: PartitionedLgssm, belief, x_prev, x, y):
    """One conditional Kalman step for a single trajectory.

    ``belief`` is the filtered z-belief at the previous step (``None`` at the
    first step, where the prior is used) and ``x_prev`` the previous sampled
    state. Returns ``(new_belief, log_f, log_g)`` where ``log_f`` is
    log p(x_t | x_{1:t-1}, y_{1:t-1}) and ``log_g`` is log p(y_t | x_{1:t}, y_{1:t-1}).
    """
    x = np.asarray(x, dtype=float)
    if belief is None:
        mx, mz = part.mux, part.muz
        Sxx, Sxz, Szz = part.Sxx0, part.Sxz0, part.Szz0
    else:
        m, P = belief.mean, belief.cov
        mx = part.Axx @ x_prev + part.Axz @ m
        mz = part.Azx @ x_prev + part.Azz @ m
        Sxx = _sym(part.Axz @ P @ part.Axz.T + part.Wxx)
        Sxz = part.Axz @ P @ part.Azz.T + part.Wxz
        Szz = _sym(part.Azz @ P @ part.Azz.T + part.Wzz)
    log_f = float(mvn_logpdf(x, mx, Sxx))
    Kx = np.linalg.solve(Sxx, Sxz).T
    zp = mz + Kx @ (x - mx)
    Pp = _sym(Szz - Kx @ Sxx @ Kx.T)
    if part.dim_y == 0:
        return GaussianBelief(zp, Pp), log_f, 0.0
    yhat = part.Cx @ x + part.Cz @ zp
    S = _sym(part.Cz @ Pp @ part.Cz.T + part.R)
    log_g = float(mvn_logpdf(np.asarray(y, dtype=float), yhat, S))
    K = np.linalg.solve(S, part.Cz @ Pp).T
    IKC = np.eye(part.dz) - K @ part.Cz
    Pf = _sym(IKC @ Pp @ IKC.T + K @ part.R @ K.T)
    return GaussianBelief(zp + K @ (y - yhat), Pf), log_f, log_g


# -- random systems -------------------------------------------------------------


def random_orthogonal(d, rng):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_stable_system(order, outputs, rng, *, noise_var=0.1, meas_var=0.1,
                         prior_var=1.0, modulus_range=(0.1, 0.95)):
    """Random stable system with process noise entering on the first state only.

    Poles have moduli drawn uniformly in ``modulus_range``; about half of the
    available pairs are complex conjugate. The modal form is rotated into a
    random orthogonal basis, which keeps the spectrum and puts the noise on a
    generic direction of the dynamics while G stays the first unit vector.
    C has i.i.d. standard normal entries.
    """
    if order < 1:
        raise ValueError("order must be positive")
    lo, hi = modulus_range
    blocks = []
    k = 0
    while k < order:
        if order - k >= 2 and rng.random() < 0.5:
            r = rng.uniform(lo, hi)
            phi = rng.uniform(0.0, np.pi)
            a, b = r * np.cos(phi), r * np.sin(phi)
            blocks.append(np.array([[a, -b], [b, a]]))
            k += 2
        else:
            blocks.append(np.array([[rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi)]]))
            k += 1
    D = np.zeros((order, order))
    i = 0
    for blk in blocks:
        n = blk.shape[0]
        D[i:i + n, i:i + n] = blk
        i += n
    V = random_orthogonal(order, rng)
    A = V @ D @ V.T
    G = np.zeros((order, 1))
    G[0, 0] = 1.0
    C = rng.standard_normal((outputs, order))
    return Lgssm(
        A=A,
        G=G,
        C=C,
        Q=np.array([[noise_var]]),
        R=meas_var * np.eye(outputs),
        mu0=np.zeros(order),
        Sigma0=prior_var * np.eye(order),
    )


def companion_system(poles, *, noise_var=0.1, meas_var=0.1, prior_var=None, C=None):
    """System in controllable canonical form with the given poles.

    Noise enters every state with variance ``noise_var``; by default the first
    state is measured. The prior is the stationary distribution unless
    ``prior_var`` is given.
    """
    coeffs = np.real(np.poly(np.asarray(poles)))
    d = len(coeffs) - 1
    A = np.zeros((d, d))
    A[0] = -coeffs[1:]
    A[1:, :-1] = np.eye(d - 1)
    if C is None:
        C = np.zeros((1, d))
        C[0, 0] = 1.0
    W = noise_var * np.eye(d)
    if prior_var is None:
        from scipy.linalg import solve_discrete_lyapunov

        Sigma0 = _sym(solve_discrete_lyapunov(A, W))
    else:
        Sigma0 = prior_var * np.eye(d)
    C = np.atleast_2d(C)
    return Lgssm(A=A, G=np.eye(d), C=C, Q=W, R=meas_var * np.eye(C.shape[0]),
                 mu0=np.zeros(d), Sigma0=Sigma0)
