"""Exact inference for linear Gaussian systems."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pgas import Lgssm, companion_system, exact_smoother, kalman_filter, random_stable_system
from pgas.gaussian import (
    KalmanError,
    PartitionedLgssm,
    conditional_stats_step,
    mvn_logpdf,
    random_orthogonal,
    sample_joint_smoothing,
    sample_mvn,
)
from pgas.streams import stream

import oracles


def _scalar(a=0.8, q=0.5, r=1.0, m0=0.0, s0=1.0):
    return Lgssm(A=[[a]], G=[[1.0]], C=[[1.0]], Q=[[q]], R=[[r]], mu0=[m0], Sigma0=[[s0]])


class TestDensities:
    def test_mvn_logpdf_matches_scipy(self):
        rng = np.random.default_rng(1)
        B = rng.standard_normal((3, 3))
        cov = B @ B.T + np.eye(3)
        mean = rng.standard_normal(3)
        x = rng.standard_normal((5, 3))
        np.testing.assert_allclose(mvn_logpdf(x, mean, cov),
                                   stats.multivariate_normal(mean, cov).logpdf(x), rtol=1e-12)

    def test_sample_mvn_singular_covariance_stays_in_range(self):
        rng = np.random.default_rng(2)
        g = np.array([1.0, 2.0, -1.0])
        draws = sample_mvn(np.zeros(3), np.outer(g, g), rng, size=200)
        resid = draws - np.outer(draws @ g / (g @ g), g)
        assert np.abs(resid).max() < 1e-10


class TestKalman:
    def test_scalar_one_step_by_hand(self):
        m = _scalar(a=0.5, q=1.0, r=2.0, m0=1.0, s0=3.0)
        kf = kalman_filter(m, [[4.0]])
        # gain 3/5, mean 1 + 0.6 * 3, variance 3 - 0.6 * 3
        assert kf.filtered_means[0, 0] == pytest.approx(2.8, abs=1e-14)
        assert kf.filtered_covs[0, 0, 0] == pytest.approx(1.2, abs=1e-14)
        assert kf.log_likelihood == pytest.approx(stats.norm(1.0, np.sqrt(5.0)).logpdf(4.0), abs=1e-12)

    def test_log_likelihood_matches_dense_gaussian(self):
        rng = stream(3)
        sysm = oracles.random_system(rng, 3, 2)
        _, obs = sysm.simulate(8, rng)
        mean, cov = oracles.joint_moments(sysm.A, sysm.G, sysm.C, sysm.Q, sysm.R, sysm.mu0,
                                          sysm.Sigma0, 8)
        ny = 8 * 2
        ref = stats.multivariate_normal(mean[-ny:], cov[-ny:, -ny:]).logpdf(obs.ravel())
        assert kalman_filter(sysm, obs).log_likelihood == pytest.approx(ref, rel=1e-10)

    def test_rejects_wrong_observation_shape(self):
        with pytest.raises(ValueError):
            kalman_filter(_scalar(), np.zeros((4, 2)))

    def test_rejects_nonfinite_observations(self):
        with pytest.raises(ValueError):
            kalman_filter(_scalar(), [[np.nan]])

    def test_covariances_symmetric_psd_with_rank_one_noise(self):
        rng = stream(4)
        sysm = random_stable_system(5, 2, rng)
        _, obs = sysm.simulate(200, rng)
        sm = exact_smoother(sysm, obs)
        for P in list(sm.filter.filtered_covs) + list(sm.covs):
            np.testing.assert_allclose(P, P.T, atol=1e-12)
            assert np.linalg.eigvalsh(P).min() > -1e-10


class TestSmoother:
    def test_scalar_with_huge_measurement_noise_returns_prior(self):
        m = _scalar(r=1e12, m0=0.3)
        sm = exact_smoother(m, np.zeros((10, 1)))
        expected = 0.3 * 0.8 ** np.arange(10)
        np.testing.assert_allclose(sm.means[:, 0], expected, atol=1e-9)

    def test_matches_dense_oracle(self):
        rng = stream(5)
        for d, dy, rank in [(1, 1, None), (3, 2, 1), (4, 1, None), (2, 3, 1)]:
            sysm = oracles.random_system(rng, d, dy, rank)
            _, obs = sysm.simulate(15, rng)
            np.testing.assert_allclose(exact_smoother(sysm, obs).means,
                                       oracles.smoothed_means(sysm, obs), rtol=1e-8, atol=1e-10)

    def test_final_step_equals_filter(self):
        rng = stream(6)
        sysm = oracles.random_system(rng, 3, 1)
        _, obs = sysm.simulate(12, rng)
        sm = exact_smoother(sysm, obs)
        np.testing.assert_array_equal(sm.means[-1], sm.filter.filtered_means[-1])
        np.testing.assert_allclose(sm.covs[-1], sm.filter.filtered_covs[-1], atol=1e-15)

    def test_first_mean_depends_on_last_observation(self):
        sysm = companion_system([0.5, -0.3])
        obs = np.zeros((10, 1))
        before = exact_smoother(sysm, obs).means[0]
        obs[-1] = 5.0
        assert np.abs(exact_smoother(sysm, obs).means[0] - before).max() > 1e-6

    def test_joint_sampler_moments(self):
        rng = stream(7)
        sysm = oracles.random_system(rng, 2, 1, 1)
        _, obs = sysm.simulate(6, rng)
        sm = exact_smoother(sysm, obs)
        draws = np.array([sample_joint_smoothing(sysm, obs, rng, sm.filter) for _ in range(4000)])
        sd = np.sqrt(np.einsum("tii->ti", sm.covs))
        assert np.all(np.abs(draws.mean(0) - sm.means) < 5 * sd / np.sqrt(4000))


class TestConditionalRecursion:
    def test_predictive_sum_equals_joint_density(self):
        rng = stream(8)
        sysm = oracles.random_system(rng, 3, 1)
        states, obs = sysm.simulate(10, rng)
        U = random_orthogonal(3, rng)
        part = PartitionedLgssm(sysm, 1, U)
        x = part.coordinates(states)[:, :1]
        belief, total = None, 0.0
        for t in range(10):
            belief, lf, lg = conditional_stats_step(part, belief, x[t - 1] if t else None, x[t], obs[t])
            total += lf + lg
        ref = oracles.marginal_log_density(sysm, x, obs, U)
        assert total == pytest.approx(ref, rel=1e-8)

    def test_schedule_is_trajectory_independent_and_cached(self):
        part = PartitionedLgssm(companion_system([0.3, 0.2, -0.1]), 1)
        assert part.schedule(3) is part.schedule(3)


class TestConstruction:
    @settings(max_examples=30, deadline=None)
    @given(order=st.integers(1, 20), seed=st.integers(0, 2**31))
    def test_random_systems_are_stable(self, order, seed):
        sysm = random_stable_system(order, 2, np.random.default_rng(seed))
        assert np.abs(np.linalg.eigvals(sysm.A)).max() < 1.0
        assert np.linalg.matrix_rank(sysm.process_cov) == 1

    def test_spectral_radius_over_many_draws(self):
        rng = stream(9)
        radii = [np.abs(np.linalg.eigvals(random_stable_system(3, 1, rng).A)).max()
                 for _ in range(10000)]
        assert max(radii) < 1.0

    def test_simulated_outputs_stay_finite(self):
        rng = stream(10)
        sysm = random_stable_system(5, 2, rng)
        _, obs = sysm.simulate(200, rng)
        assert np.all(np.isfinite(obs)) and np.isfinite(obs.var())

    def test_companion_poles_and_stationary_prior(self):
        poles = [-0.65, -0.12, 0.22 + 0.10j, 0.22 - 0.10j]
        sysm = companion_system(poles)
        np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(sysm.A)), np.sort_complex(poles),
                                   atol=1e-12)
        P = oracles.lyapunov_fixed_point(sysm.A, sysm.process_cov)
        np.testing.assert_allclose(sysm.Sigma0, P, atol=1e-10)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            Lgssm(A=[[1.0]], G=[[1.0]], C=[[1.0]], Q=[[-1.0]], R=[[1.0]], mu0=[0.0], Sigma0=[[1.0]])
        with pytest.raises(ValueError):
            Lgssm(A=[[1.0]], G=[[1.0]], C=[[1.0]], Q=[[1.0]], R=[[0.0]], mu0=[0.0], Sigma0=[[1.0]])

    def test_json_round_trip(self, tmp_path):
        sysm = random_stable_system(4, 2, stream(11))
        path = tmp_path / "sys.json"
        sysm.to_json(path)
        back = Lgssm.from_json(path)
        for name in ("A", "G", "C", "Q", "R", "mu0", "Sigma0"):
            np.testing.assert_array_equal(getattr(back, name), getattr(sysm, name))
        data = json.loads(path.read_text())
        assert data["A"]["rows"] == 4 and len(data["A"]["data"]) == 16

    def test_kalman_error_is_linalg_error(self):
        assert issubclass(KalmanError, np.linalg.LinAlgError)
