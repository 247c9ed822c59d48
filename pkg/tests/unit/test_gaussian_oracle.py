"""Tests for the closed-form Gaussian sampler check."""

import math
import statistics

import pytest
import torch
from gaussian_oracle import (
    GaussianPrior,
    analytic_denoiser,
    analytic_posterior,
    oracle_check,
)
from noise_schedule import NoiseSchedule
from posterior_sampler import SamplerConfig

PRIOR = GaussianPrior(mu0=0.0, var0=0.01)


def _cfg(rho):
    return SamplerConfig(T=1000, N=50, rho=rho, n_samples=1)


class TestAnalyticDenoiser:
    def test_half_alpha_bar(self):
        model = analytic_denoiser(GaussianPrior(0.0, 1.0), NoiseSchedule.from_betas([0.5]))
        eps = model(torch.ones(1, 1, 1, dtype=torch.float64), 1)
        assert float(eps) == pytest.approx(math.sqrt(0.5))

    def test_zero_at_marginal_mean(self):
        schedule = NoiseSchedule.from_betas([0.5])
        model = analytic_denoiser(GaussianPrior(2.0, 0.3), schedule)
        x_t = torch.full((1, 1, 1), math.sqrt(0.5) * 2.0, dtype=torch.float64)
        assert float(model(x_t, 1)) == pytest.approx(0.0, abs=1e-12)

    def test_zero_noise_limit(self, schedule):
        model = analytic_denoiser(PRIOR, schedule)
        assert float(model(torch.full((1, 1, 1), 3.0), 0)) == 0.0

    def test_rejects_non_positive_variance(self):
        with pytest.raises(ValueError):
            GaussianPrior(0.0, 0.0)


class TestAnalyticPosterior:
    def test_conjugate_update(self):
        mean, var = analytic_posterior(GaussianPrior(0.0, 1.0), 1.0, 0.25)
        assert mean == pytest.approx(0.8)
        assert var == pytest.approx(0.2)

    def test_equal_variances_average(self):
        mean, _ = analytic_posterior(GaussianPrior(1.0, 0.5), 3.0, 0.5)
        assert mean == pytest.approx(2.0)

    def test_uninformative_observation(self):
        mean, _ = analytic_posterior(GaussianPrior(1.0, 0.5), 3.0, 1e12)
        assert mean == pytest.approx(1.0, abs=1e-9)

    def test_rejects_zero_variance(self):
        with pytest.raises(ValueError):
            analytic_posterior(PRIOR, 1.0, 0.0)


class TestOracleCheck:
    def test_unguided_samples_follow_prior(self, schedule):
        for seed in range(5):
            report = oracle_check(PRIOR, 1.0, _cfg(0.0), 2000, seed, schedule)
            assert report.distance_mean_to_prior <= 3 * report.standard_error
            assert report.nominal_posterior_mean is None

    def test_guidance_moves_towards_observation(self, schedule):
        medians = []
        for rho in (0.0, 1.0, 10.0, 50.0):
            distances = [
                oracle_check(PRIOR, 1.0, _cfg(rho), 2000, seed, schedule).distance_mean_to_y
                for seed in range(5)
            ]
            medians.append(statistics.median(distances))
        assert all(later <= earlier for earlier, later in zip(medians, medians[1:]))
        assert medians[-1] < abs(PRIOR.mu0 - 1.0)

    def test_guidance_shrinks_mean_squared_distance(self, schedule):
        medians = [
            statistics.median(
                oracle_check(PRIOR, 1.0, _cfg(rho), 2000, seed, schedule).mean_sq_distance_to_y
                for seed in range(5)
            )
            for rho in (0.0, 1.0, 10.0)
        ]
        assert all(later <= earlier for earlier, later in zip(medians, medians[1:]))

    def test_guided_mean_lies_between_prior_and_observation(self, schedule):
        report = oracle_check(PRIOR, 1.0, _cfg(50.0), 2000, 0, schedule)
        assert PRIOR.mu0 < report.empirical_mean < 1.0
        assert report.distance_mean_to_posterior < abs(PRIOR.mu0 - report.nominal_posterior_mean)

    def test_nominal_posterior_reported(self, schedule):
        report = oracle_check(PRIOR, 1.0, _cfg(50.0), 200, 0, schedule)
        assert report.nominal_likelihood_var == pytest.approx(0.01)
        assert report.nominal_posterior_mean == pytest.approx(0.5)

    def test_small_image_shape(self, schedule):
        report = oracle_check(PRIOR, 1.0, _cfg(10.0), 50, 0, schedule, shape=(1, 8, 8))
        assert report.shape == [1, 8, 8]
        assert math.isfinite(report.empirical_mean)

    def test_same_seed_same_report(self, schedule):
        first = oracle_check(PRIOR, 1.0, _cfg(10.0), 100, 3, schedule).to_dict()
        second = oracle_check(PRIOR, 1.0, _cfg(10.0), 100, 3, schedule).to_dict()
        assert first == second

    def test_rejects_other_shapes(self, schedule):
        with pytest.raises(ValueError, match="shape"):
            oracle_check(PRIOR, 1.0, _cfg(1.0), 10, 0, schedule, shape=(3, 8, 8))

    def test_needs_two_samples(self, schedule):
        with pytest.raises(ValueError):
            oracle_check(PRIOR, 1.0, _cfg(1.0), 1, 0, schedule)
