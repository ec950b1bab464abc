"""Concrete models: marginalized linear Gaussian systems, SVD-reduced degenerate
systems and the coordinated-turn range-bearing tracking model."""

from __future__ import annotations

import copy

import numpy as np

from .gaussian import LOG_2PI, Lgssm, PartitionedLgssm, _chol, _sym, companion_system
from .model import ModelError, StateSpaceModel, as_trajectory


def _gauss_logpdf(resid, L_inv, logdet):
    r = resid @ L_inv.T
    return -0.5 * (resid.shape[1] * LOG_2PI + logdet + np.einsum("ij,ij->i", r, r))


class MarginalizedLgssm(StateSpaceModel):
    """Rao-Blackwellized target for a linear Gaussian system.

    The state is split as ``(x; z) = basis.T @ xi`` where x holds the first
    ``dim_x`` coordinates. The sampled process is x alone; z is integrated
    out by a conditional Kalman filter, which makes x non-Markovian whenever
    z is present. With ``dim_x`` equal to the full dimension the target is the
    plain (Markovian) linear Gaussian model.

    carry: array of shape (n, dim_x + dim_z) holding the previous x and the
    filtered z-mean. Because the conditional filter's covariances do not
    depend on the trajectory, one step is an affine map of ``[carry, x]`` and
    is evaluated with a single matrix product.
    """

    bootstrap = True

    def __init__(self, base: Lgssm, dim_x=None, basis=None):
        if dim_x is None:
            dim_x = base.dim_x
        self.part = PartitionedLgssm(base, dim_x, basis)
        self.base = base
        self.dim_x = dim_x
        self.dim_z = self.part.dz
        self.dim_y = base.dim_y
        self.markov = self.dim_z == 0
        self._cache = []

    def _step(self, t):
        while len(self._cache) <= t:
            self._cache.append(self._build(len(self._cache)))
        return self._cache[t]

    def _build(self, t):
        p, s = self.part, self.part.schedule(t)
        dx, dz = self.dim_x, self.dim_z
        d = dx + dz
        if t == 0:
            AxT, AzT = np.zeros((d, dx)), np.zeros((d, dz))
            cx0, cz0 = p.mux, p.muz
        else:
            AxT = np.vstack([p.Axx.T, p.Axz.T])
            AzT = np.vstack([p.Azx.T, p.Azz.T])
            cx0, cz0 = np.zeros(dx), np.zeros(dz)
        LiT, KxT = s["Lx_inv"].T, s["Kx"].T
        LyiT, KyT = s["Ly_inv"].T, s["Ky"].T
        # u = [carry, x]; residual x - E[x] = u D + dc
        D = np.vstack([-AxT, np.eye(dx)])
        dc = -cx0
        Z = np.vstack([AzT, np.zeros((dx, dz))]) + D @ KxT
        zc = cz0 + dc @ KxT
        V = -np.vstack([np.zeros((d, self.dim_y)), p.Cx.T]) - Z @ p.Cz.T
        vc = -zc @ p.Cz.T
        dy = self.dim_y
        # rows of M act on [carry, x, y, 1]
        M = np.vstack([
            np.hstack([D @ LiT, V @ LyiT, Z + V @ KyT]),
            np.hstack([np.zeros((dy, dx)), LyiT, KyT]),
            np.concatenate([dc @ LiT, vc @ LyiT, zc + vc @ KyT])[None, :],
        ])
        cx = s["logdet_x"] + dx * LOG_2PI
        cy = s["logdet_y"] + dy * LOG_2PI
        return (M, cx, cy, AxT, cx0, s["Lx"].T.copy(), s["Ly"].T.copy())

    def init_carry(self, n):
        return np.zeros((n, self.dim_x + self.dim_z))

    def sample_transition(self, carry, t, rng):
        _, _, _, AxT, cx0, LxT, _ = self._step(t)
        mx = carry @ AxT
        mx += cx0
        mx += rng.standard_normal(mx.shape) @ LxT
        return mx

    def _affine(self, carry, x, y, t):
        st = self._step(t)
        n, d = carry.shape
        dx = self.dim_x
        u = np.empty((n, d + dx + self.dim_y + 1))
        u[:, :d] = carry
        u[:, d:d + dx] = x
        u[:, d + dx:-1] = y
        u[:, -1] = 1.0
        return u @ st[0], st

    def increment(self, carry, x, y, t):
        dx, dy = self.dim_x, self.dim_y
        o, st = self._affine(carry, x, y, t)
        q = np.square(o[:, :dx + dy])
        if dx == 1:
            log_f = -0.5 * (st[1] + q[:, 0])
        else:
            log_f = -0.5 * (st[1] + q[:, :dx].sum(axis=1))
        if dy == 1:
            log_g = -0.5 * (st[2] + q[:, dx])
        else:
            log_g = -0.5 * (st[2] + q[:, dx:].sum(axis=1))
        new = np.empty((o.shape[0], dx + self.dim_z))
        new[:, :dx] = x
        new[:, dx:] = o[:, dx + dy:]
        return log_f, log_g, new

    def sample_observation(self, carry, x, t, rng):
        dx, dy = self.dim_x, self.dim_y
        o, st = self._affine(carry, x, np.zeros(dy), t)
        # with y = 0 the normalized innovation is -Ly^{-1} yhat
        yhat = -(o[:, dx:dx + dy] @ st[6])
        return yhat + rng.standard_normal(yhat.shape) @ st[6]

    def smoothed_x_means(self, obs):
        """Exact posterior means of the sampled coordinates."""
        from .gaussian import exact_smoother

        means = exact_smoother(self.base, obs).means
        return self.part.coordinates(means)[:, : self.dim_x]


def rbps_system(noise_var=0.1, meas_var=0.1):
    """Single-output 4th-order system with poles -0.65, -0.12, 0.22 +- 0.10i."""
    return companion_system([-0.65, -0.12, 0.22 + 0.10j, 0.22 - 0.10j],
                            noise_var=noise_var, meas_var=meas_var)


# -- degenerate models ----------------------------------------------------------------


def _wrap_none(y, yhat):
    return y - yhat


class SvdReducedModel(StateSpaceModel):
    """Degenerate system xi_t = f(xi_{t-1}) + G w_{t-1}, y_t = h(xi_t) + e_t recast
    on the range of G.

    With G = U [S; 0] V^T, the coordinates (x; z) = U^T xi split into x,
    driven by non-degenerate noise with covariance S V^T Q V S, and z, which
    is a deterministic function of the x-history once z_1 is fixed. The
    result is a non-Markovian model over x.

    If ``z1`` is ``None`` the initial z is inferred: the state vector then
    has the full dimension d, holding (x_1, z_1) at the first step and
    (x_t, 0) afterwards. The zero padding carries no information and keeps
    all state vectors the same size.

    carry: the reconstructed full state xi_{t-1}, shape (n, d).
    """

    markov = False
    bootstrap = True

    def __init__(self, transition, measurement, G, Q, R, prior_mean, prior_cov, *,
                 z1=None, theta=(), residual=None, log_prior=None, rank_tol=1e-10, linear=None):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        d = G.shape[0]
        U, s, Vt = np.linalg.svd(G)
        r = int(np.sum(s > rank_tol * s.max()))
        if r >= d:
            raise ModelError("G has full row rank; the model is not degenerate")
        self.U, self.Ux, self.Uz = U, U[:, :r].copy(), U[:, r:].copy()
        self.singular_values = s[:r]
        self.V = Vt.T
        self.rank = r
        self.d = d
        self.f = transition
        self.h = measurement
        self.residual = residual or _wrap_none
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.dim_y = self.R.shape[0]
        self.prior_mean = np.asarray(prior_mean, dtype=float)
        self.prior_cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))
        self._log_prior = log_prior
        SVt = s[:r, None] * Vt[:r]
        self.noise_cov = _sym(SVt @ self.Q @ SVt.T)
        Lv = _chol(self.noise_cov, "reduced process noise covariance")
        self._LvT = Lv.T.copy()
        self._Lv_invT = np.linalg.inv(Lv).T.copy()
        self._cv = r * LOG_2PI + 2.0 * np.sum(np.log(np.diag(Lv)))
        LR = _chol(self.R, "measurement covariance")
        self._LR_invT = np.linalg.inv(LR).T.copy()
        self._LRT = LR.T.copy()
        self._cR = self.dim_y * LOG_2PI + 2.0 * np.sum(np.log(np.diag(LR)))

        # prior of the first state vector in the rotated coordinates
        m0 = U.T @ self.prior_mean
        P0 = _sym(U.T @ self.prior_cov @ U)
        if z1 is None:
            self.z1 = None
            self.dim_x = d
            mean1, cov1 = m0, P0
        else:
            self.z1 = np.asarray(z1, dtype=float).reshape(d - r)
            self.dim_x = r
            gain = P0[:r, r:] @ np.linalg.pinv(P0[r:, r:], hermitian=True)
            mean1 = m0[:r] + gain @ (self.z1 - m0[r:])
            cov1 = _sym(P0[:r, :r] - gain @ P0[r:, :r])
        L1 = _chol(cov1, "initial state covariance")
        self._mean1 = mean1
        self._L1T = L1.T.copy()
        self._L1_invT = np.linalg.inv(L1).T.copy()
        self._c1 = len(mean1) * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L1)))
        self._lin = None if linear is None else self._linear_maps(*linear)

    def _linear_maps(self, A, C):
        # for t > 0 the whitened residuals and xi_t are affine in (carry, x):
        # [r, C xi whitened, xi] = carry @ Mc + x @ Mx
        A, C = np.asarray(A, dtype=float), np.asarray(C, dtype=float)
        Pz = self.Uz @ self.Uz.T
        W = C.T @ self._LR_invT
        Mc = np.hstack([-A.T @ self.Ux @ self._Lv_invT, A.T @ Pz @ W, A.T @ Pz])
        Mx = np.hstack([self._Lv_invT, self.Ux.T @ W, self.Ux.T])
        return Mc, Mx

    # parameters -------------------------------------------------------------------
    def at(self, theta):
        other = copy.copy(self)
        other.theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return other

    def log_prior(self, theta):
        if self._log_prior is None:
            return 0.0
        return float(self._log_prior(np.atleast_1d(theta)))

    # coordinates --------------------------------------------------------------------
    def _first_xi(self, x):
        if self.z1 is None:
            return x @ self.U.T
        z = np.broadcast_to(self.z1, (x.shape[0], self.d - self.rank))
        return x @ self.Ux.T + z @ self.Uz.T

    def init_carry(self, n):
        return np.zeros((n, self.d))

    def sample_transition(self, carry, t, rng):
        n = carry.shape[0]
        if t == 0:
            return self._mean1 + rng.standard_normal((n, self.dim_x)) @ self._L1T
        fx = self.f(carry, self.theta) @ self.Ux
        x = fx + rng.standard_normal(fx.shape) @ self._LvT
        if self.z1 is None:
            x = np.concatenate([x, np.zeros((n, self.d - self.rank))], axis=1)
        return x

    def _advance(self, carry, x, t):
        """Return (log_f, xi_t)."""
        if t == 0:
            r = (x - self._mean1) @ self._L1_invT
            return -0.5 * (self._c1 + np.einsum("ij,ij->i", r, r)), self._first_xi(x)
        fxi = self.f(carry, self.theta)
        xr = x[:, : self.rank]
        r = (xr - fxi @ self.Ux) @ self._Lv_invT
        log_f = -0.5 * (self._cv + np.einsum("ij,ij->i", r, r))
        if self.z1 is None and self.d > self.rank:
            log_f = np.where(np.any(x[:, self.rank:] != 0.0, axis=1), -np.inf, log_f)
        xi = xr @ self.Ux.T + (fxi @ self.Uz) @ self.Uz.T
        return log_f, xi

    def _linear_increment(self, carry, x, y):
        Mc, Mx = self._lin
        k, m = self.rank, self.rank + self.dim_y
        o = carry @ Mc + x[:, :k] @ Mx
        o[:, k:m] -= y @ self._LR_invT
        q = np.square(o[:, :m])
        log_f = -0.5 * (self._cv + q[:, :k].sum(axis=1))
        if self.z1 is None and self.d > k and np.count_nonzero(x[:, k:]):
            log_f = np.where(np.any(x[:, k:] != 0.0, axis=1), -np.inf, log_f)
        log_g = -0.5 * (self._cR + q[:, k:].sum(axis=1))
        return log_f, log_g, o[:, m:]

    def increment(self, carry, x, y, t):
        if self._lin is not None and t > 0:
            return self._linear_increment(carry, x, y)
        if x.shape[0] != carry.shape[0]:
            x = np.repeat(x, carry.shape[0], axis=0)
        log_f, xi = self._advance(carry, x, t)
        r = self.residual(y, self.h(xi)) @ self._LR_invT
        log_g = -0.5 * (self._cR + np.einsum("ij,ij->i", r, r))
        return log_f, log_g, xi

    def sample_observation(self, carry, x, t, rng):
        _, xi = self._advance(carry, x, t)
        yhat = self.h(xi)
        return yhat + rng.standard_normal(yhat.shape) @ self._LRT

    def reconstruct(self, trajectory, thetas=None):
        """Full states xi_{1:T} along one trajectory (T, d_x) or a batch (S, T, d_x).

        ``thetas`` optionally gives one parameter vector per trajectory of the
        batch, shape (S, d_theta).
        """
        traj = np.asarray(trajectory, dtype=float)
        single = traj.ndim <= 2
        if single:
            traj = as_trajectory(traj, self.dim_x)[None]
        S, T, _ = traj.shape
        model = self
        if thetas is not None:
            th = np.asarray(thetas, dtype=float).reshape(S, -1)
            model = self.at(th[:, 0] if th.shape[1] == 1 else th)
        out = np.empty((S, T, self.d))
        carry = self.init_carry(S)
        for t in range(T):
            _, carry = model._advance(carry, traj[:, t], t)
            out[:, t] = carry
        return out[0] if single else out

    def states(self, trajectory, obs=None, thetas=None):
        return self.reconstruct(trajectory, thetas)

    def log_density_original(self, xi, obs):
        """log p(xi_{1:T}, y_{1:T}) in the original coordinates, measured on the range of G."""
        xi = np.asarray(xi, dtype=float)
        obs = np.atleast_2d(obs)
        from .gaussian import mvn_logpdf

        if self.z1 is None:
            lp = mvn_logpdf(xi[0], self.prior_mean, self.prior_cov)
        else:
            lp = mvn_logpdf(self.Ux.T @ xi[0], self._mean1, self._L1T.T @ self._L1T)
        for t in range(1, xi.shape[0]):
            step = xi[t] - self.f(xi[t - 1][None, :], self.theta)[0]
            lp += mvn_logpdf(self.Ux.T @ step, np.zeros(self.rank), self.noise_cov)
        for t in range(xi.shape[0]):
            res = self.residual(obs[t][None, :], self.h(xi[t][None, :]))[0]
            lp += mvn_logpdf(res, np.zeros(self.dim_y), self.R)
        return float(lp)


def linear_svd_model(system: Lgssm, z1=None):
    """SvdReducedModel for a linear system (f(xi) = A xi, h(xi) = C xi)."""
    A, C = system.A, system.C
    return SvdReducedModel(
        lambda xi, theta: xi @ A.T,
        lambda xi: xi @ C.T,
        system.G, system.Q, system.R, system.mu0, system.Sigma0, z1=z1, linear=(A, C),
    )


# -- coordinated turn ----------------------------------------------------------------

CT_DT = 0.1
CT_PRIOR_MEAN = np.array([500.0, 500.0, 0.0, 0.0])
CT_PRIOR_COV = np.diag([20.0, 20.0, 5.0, 5.0])
CT_PROCESS_COV = 10.0 * np.eye(2)
CT_MEAS_COV = np.diag([50.0, 1e-4])
CT_TRUE_INIT = np.array([490.0, 490.0, 0.0, 5.0])
_TAYLOR_EPS = 1e-6


def ct_noise_matrix(dt=CT_DT):
    h = 0.5 * dt * dt
    return np.array([[h, 0.0], [0.0, h], [dt, 0.0], [0.0, dt]])


def ct_transition(xi, theta, dt=CT_DT, omega=None):
    """Coordinated-turn step for states of shape (..., 4) = (p_x, p_y, v_x, v_y).

    The turn rate is theta / speed. For |dt * rate| below 1e-6 (including
    zero speed and theta = 0) the terms sin(dt r)/r and (1 - cos(dt r))/r use
    their second-order expansions.
    """
    xi = np.asarray(xi, dtype=float)
    theta = np.asarray(theta, dtype=float).ravel()
    theta = 0.0 if theta.size == 0 else (theta[0] if theta.size == 1 else theta)
    px, py, vx, vy = xi[..., 0], xi[..., 1], xi[..., 2], xi[..., 3]
    speed = np.hypot(vx, vy)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(speed > 0.0, theta / np.where(speed > 0.0, speed, 1.0), 0.0)
    a = dt * rate
    small = np.abs(a) < _TAYLOR_EPS
    safe = np.where(small, 1.0, rate)
    sa, ca = np.sin(a), np.cos(a)
    s_over = np.where(small, dt * (1.0 - a * a / 6.0), sa / safe)
    c_over = np.where(small, dt * a / 2.0, (1.0 - ca) / safe)
    out = np.stack([
        px + s_over * vx - c_over * vy,
        py + c_over * vx + s_over * vy,
        ca * vx - sa * vy,
        sa * vx + ca * vy,
    ], axis=-1)
    if omega is not None:
        out = out + np.asarray(omega, dtype=float) @ ct_noise_matrix(dt).T
    return out


def range_bearing(xi, e=None):
    """Range and bearing (angle from the y-axis towards the x-axis) of the position."""
    xi = np.asarray(xi, dtype=float)
    px, py = xi[..., 0], xi[..., 1]
    y = np.stack([np.hypot(px, py), np.arctan2(px, py)], axis=-1)
    if e is not None:
        y = y + e
    return y


def wrap_bearing_residual(y, yhat):
    r = y - yhat
    b = r[..., 1]
    # map to (-pi, pi]
    b = np.pi - np.mod(np.pi - b, 2.0 * np.pi)
    return np.concatenate([r[..., :1], b[..., None]], axis=-1)


def ct_log_prior(theta, scale=10.0):
    th = float(np.asarray(theta).ravel()[0])
    return -0.5 * (th / scale) ** 2 - np.log(scale * np.sqrt(2.0 * np.pi))


def coordinated_turn_model(theta=1.0, *, dt=CT_DT, z1=None, prior_scale=10.0):
    """Range-bearing CT tracking model reduced to the 2-dimensional noise range."""
    return SvdReducedModel(
        lambda xi, th: ct_transition(xi, th, dt),
        range_bearing,
        ct_noise_matrix(dt),
        CT_PROCESS_COV,
        CT_MEAS_COV,
        CT_PRIOR_MEAN,
        CT_PRIOR_COV,
        z1=z1,
        theta=[theta],
        residual=wrap_bearing_residual,
        log_prior=lambda th: ct_log_prior(th, prior_scale),
    )


def simulate_ct(T, rng, theta=1.0, xi1=CT_TRUE_INIT, dt=CT_DT):
    """Simulate the original 4-dimensional CT system; returns (states, observations)."""
    xs = np.empty((T, 4))
    xs[0] = xi1
    LQ = np.linalg.cholesky(CT_PROCESS_COV)
    LR = np.linalg.cholesky(CT_MEAS_COV)
    for t in range(1, T):
        xs[t] = ct_transition(xs[t - 1], theta, dt, omega=LQ @ rng.standard_normal(2))
    ys = range_bearing(xs) + rng.standard_normal((T, 2)) @ LR.T
    return xs, ys


def simulate(model: StateSpaceModel, T, rng):
    """Forward simulation of a model; returns (trajectory, observations)."""
    if T < 1:
        raise ValueError("T must be positive")
    xs = np.empty((T, model.dim_x))
    ys = np.empty((T, model.dim_y))
    carry = model.init_carry(1)
    for t in range(T):
        x = model.sample_transition(carry, t, rng)
        y = model.sample_observation(carry, x, t, rng)
        _, _, carry = model.increment(carry, x, y[0], t)
        xs[t], ys[t] = x[0], y[0]
    return xs, ys
