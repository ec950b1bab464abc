"""Marginalized and SVD-reduced linear models, and the coordinated-turn model."""

import math

import numpy as np
import pytest

from pgas import (
    MarginalizedLgssm,
    ModelError,
    SvdReducedModel,
    companion_system,
    coordinated_turn_model,
    linear_svd_model,
    random_stable_system,
    rbps_system,
    simulate,
)
from pgas.gaussian import Lgssm, random_orthogonal
from pgas.model import log_gamma, log_h_factor
from pgas.models import (
    CT_MEAS_COV,
    CT_PRIOR_COV,
    CT_PRIOR_MEAN,
    CT_PROCESS_COV,
    ct_noise_matrix,
    ct_transition,
    range_bearing,
    simulate_ct,
    wrap_bearing_residual,
)
from pgas.streams import stream

import oracles


class TestMarginalized:
    def test_four_state_system_matches_dense_density(self):
        sysm = rbps_system()
        states, obs = sysm.simulate(12, stream(1))
        model = MarginalizedLgssm(sysm, dim_x=1)
        x = states[:, :1]
        assert log_gamma(model, x, obs) == pytest.approx(
            oracles.marginal_log_density(sysm, x, obs), rel=1e-10)

    def test_rotated_basis_matches_dense_density(self):
        rng = stream(2)
        sysm = oracles.random_system(rng, 4, 2)
        U = random_orthogonal(4, rng)
        states, obs = sysm.simulate(9, rng)
        model = MarginalizedLgssm(sysm, dim_x=2, basis=U)
        x = (states @ U)[:, :2]
        assert log_gamma(model, x, obs) == pytest.approx(
            oracles.marginal_log_density(sysm, x, obs, U), rel=1e-10)

    def test_nothing_marginalized_is_plain_model(self):
        rng = stream(3)
        sysm = oracles.random_system(rng, 2, 1)
        states, obs = sysm.simulate(7, rng)
        model = MarginalizedLgssm(sysm)
        assert model.markov and model.dim_z == 0
        assert log_gamma(model, states, obs) == pytest.approx(
            oracles.marginal_log_density(sysm, states, obs), rel=1e-10)

    def test_marginal_process_is_not_markov(self):
        sysm = rbps_system()
        states, obs = sysm.simulate(4, stream(4))
        model = MarginalizedLgssm(sysm, dim_x=1)
        x = states[:, :1]
        moved = x.copy()
        moved[0] += 1.0
        a = log_h_factor(model, 1, x[:3], x[3:], obs)
        b = log_h_factor(model, 1, moved[:3], x[3:], obs)
        assert abs(a - b) > 1e-6

    def test_vectorized_increment_matches_single_particle(self):
        sysm = rbps_system()
        model = MarginalizedLgssm(sysm, dim_x=1)
        rng = stream(5)
        carry = rng.standard_normal((6, 4))
        x = rng.standard_normal((6, 1))
        y = np.array([0.3])
        lf, lg, new = model.increment(carry, x, y, 3)
        for i in range(6):
            lf1, lg1, new1 = model.increment(carry[i:i + 1], x[i:i + 1], y, 3)
            assert lf1[0] == pytest.approx(lf[i], abs=1e-12)
            assert lg1[0] == pytest.approx(lg[i], abs=1e-12)
            np.testing.assert_allclose(new1[0], new[i], atol=1e-12)
        lf_b, lg_b, _ = model.increment(carry, x[:1], y, 3)
        lf_r, lg_r, _ = model.increment(carry, np.repeat(x[:1], 6, axis=0), y, 3)
        np.testing.assert_allclose(lf_b, lf_r, atol=1e-13)
        np.testing.assert_allclose(lg_b, lg_r, atol=1e-13)

    def test_stationary_simulation_matches_lyapunov(self):
        sysm = companion_system([0.5, -0.3], noise_var=1.0)
        rng = stream(6)
        finals = np.array([sysm.simulate(30, rng)[0][-1] for _ in range(4000)])
        P = oracles.lyapunov_fixed_point(sysm.A, sysm.process_cov)
        np.testing.assert_allclose(np.cov(finals.T), P, atol=6 * np.abs(P).max() / np.sqrt(4000))

    def test_simulate_through_interface(self):
        model = MarginalizedLgssm(rbps_system(), dim_x=1)
        traj, obs = simulate(model, 25, stream(7))
        assert traj.shape == (25, 1) and obs.shape == (25, 1)
        assert np.all(np.isfinite(obs))


class TestSvdReduction:
    def _linear(self, seed=0, d=3, z1=None):
        rng = stream(seed)
        sysm = random_stable_system(d, 1, rng)
        G = np.zeros((d, 1))
        G[:, 0] = random_orthogonal(d, rng)[:, 0]
        sysm = Lgssm(sysm.A, G, sysm.C, sysm.Q, sysm.R, rng.standard_normal(d), sysm.Sigma0)
        return sysm, rng

    def test_bases_orthonormal_and_rank(self):
        sysm, _ = self._linear(1)
        model = linear_svd_model(sysm)
        np.testing.assert_allclose(model.U.T @ model.U, np.eye(3), atol=1e-10)
        assert model.rank == 1 and np.all(model.singular_values > 0)

    def test_reconstruction_reproduces_trajectory(self):
        sysm, rng = self._linear(2)
        states, obs = sysm.simulate(20, rng)
        model = linear_svd_model(sysm)
        x = np.zeros((20, 3))
        x[0] = model.U.T @ states[0]
        x[1:, :1] = states[1:] @ model.Ux
        np.testing.assert_allclose(model.reconstruct(x), states, atol=1e-10)

    def test_density_equals_original_coordinates(self):
        sysm, rng = self._linear(3)
        states, obs = sysm.simulate(15, rng)
        model = linear_svd_model(sysm)
        x = np.zeros((15, 3))
        x[0] = model.U.T @ states[0]
        x[1:, :1] = states[1:] @ model.Ux
        assert log_gamma(model, x, obs) == pytest.approx(
            model.log_density_original(states, obs), rel=1e-10)

    def test_known_initial_z(self):
        sysm, rng = self._linear(4)
        states, obs = sysm.simulate(10, rng)
        U = np.linalg.svd(sysm.G)[0]
        model = linear_svd_model(sysm, z1=U[:, 1:].T @ states[0])
        assert model.dim_x == 1
        x = states @ model.Ux
        np.testing.assert_allclose(model.reconstruct(x), states, atol=1e-10)
        assert log_gamma(model, x, obs) == pytest.approx(
            model.log_density_original(states, obs), rel=1e-10)

    def test_nonzero_padding_has_zero_density(self):
        sysm, rng = self._linear(5)
        _, obs = sysm.simulate(4, rng)
        model = linear_svd_model(sysm)
        x = np.zeros((4, 3))
        x[2, 2] = 1e-3
        assert log_gamma(model, x, obs) == -np.inf

    def test_full_rank_noise_rejected(self):
        sysm = companion_system([0.5, 0.2])
        with pytest.raises(ModelError):
            linear_svd_model(sysm)

    def test_batch_reconstruction(self):
        sysm, rng = self._linear(6)
        model = linear_svd_model(sysm)
        batch = np.zeros((4, 6, 3))
        batch[:, 0] = rng.standard_normal((4, 3))
        batch[:, 1:, 0] = rng.standard_normal((4, 5))
        full = model.reconstruct(batch)
        for i in range(4):
            np.testing.assert_allclose(full[i], model.reconstruct(batch[i]), atol=1e-12)


class TestCoordinatedTurn:
    def test_zero_theta_is_constant_velocity(self):
        xi = np.array([1.0, 2.0, 3.0, -4.0])
        np.testing.assert_allclose(ct_transition(xi, 0.0, 0.1), [1.3, 1.6, 3.0, -4.0], atol=1e-14)

    def test_matches_scripted_formula(self):
        xi = np.array([490.0, 490.0, 0.0, 5.0])
        np.testing.assert_allclose(ct_transition(xi, 1.0, 0.1),
                                   oracles.ct_step_scripted(xi, 1.0, 0.1), rtol=1e-13)

    def test_zero_speed_uses_limit(self):
        out = ct_transition(np.array([1.0, 1.0, 0.0, 0.0]), 1.0, 0.1)
        np.testing.assert_array_equal(out, [1.0, 1.0, 0.0, 0.0])

    def test_continuous_in_theta_at_zero(self):
        xi = np.array([10.0, -5.0, 2.0, 1.0])
        lo, hi = ct_transition(xi, -1e-6, 0.1), ct_transition(xi, 1e-6, 0.1)
        assert np.abs(hi - lo).max() < 1e-6

    def test_symmetric_measurement(self):
        y = range_bearing(np.array([500.0, 500.0, 3.0, -1.0]))
        assert y[0] == pytest.approx(500 * math.sqrt(2), rel=1e-14)
        assert y[1] == pytest.approx(math.pi / 4, abs=1e-15)

    def test_bearing_residual_wrapped(self):
        r = wrap_bearing_residual(np.array([[0.0, math.pi - 0.01]]), np.array([[0.0, -math.pi + 0.01]]))
        assert r[0, 1] == pytest.approx(-0.02, abs=1e-12)

    def test_noise_matrix_rank_two(self):
        model = coordinated_turn_model()
        assert np.linalg.matrix_rank(ct_noise_matrix(0.1)) == 2
        assert model.rank == 2 and model.dim_x == 4

    def test_constants(self):
        np.testing.assert_array_equal(CT_PRIOR_MEAN, [500, 500, 0, 0])
        np.testing.assert_array_equal(CT_PRIOR_COV, np.diag([20, 20, 5, 5]))
        np.testing.assert_array_equal(CT_PROCESS_COV, 10 * np.eye(2))
        np.testing.assert_array_equal(CT_MEAS_COV, np.diag([50, 1e-4]))

    def test_noise_free_simulation_repeats_transition(self):
        rng = stream(8)
        xs, _ = simulate_ct(20, rng)
        assert xs.shape == (20, 4)
        # the noise lives in the range of G, so deviations from f are in that range
        G = ct_noise_matrix(0.1)
        P = np.eye(4) - G @ np.linalg.pinv(G)
        for t in range(1, 20):
            dev = xs[t] - ct_transition(xs[t - 1], 1.0, 0.1)
            assert np.abs(P @ dev).max() < 1e-9

    def test_reduced_density_equals_original(self):
        xs, ys = simulate_ct(15, stream(9))
        model = coordinated_turn_model(theta=1.0)
        x = np.zeros((15, 4))
        x[0] = model.U.T @ xs[0]
        x[1:, :2] = xs[1:] @ model.Ux
        np.testing.assert_allclose(model.reconstruct(x), xs, atol=1e-8)
        assert log_gamma(model, x, ys) == pytest.approx(model.log_density_original(xs, ys), rel=1e-9)

    def test_turning_trajectory(self):
        xs, _ = simulate_ct(200, stream(10))
        heading = np.unwrap(np.arctan2(xs[:, 3], xs[:, 2]))
        assert abs(heading[-1] - heading[0]) > 0.5
