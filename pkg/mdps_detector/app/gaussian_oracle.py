"""Closed-form Gaussian check of the posterior sampler.

With a Gaussian prior N(μ0, σ0²) the optimal noise predictor and the conjugate
posterior are analytic, so the sampler can be verified without a trained network.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Any

import torch
from denoiser import DenoiserModel
from noise_schedule import NoiseSchedule, Rng
from posterior_sampler import ObservationModel, SamplerConfig, mdps_sample_many

_LOGGER = logging.getLogger(__name__)

BACKEND_ANALYTIC = "analytic"
SCALAR_SHAPE = (1, 1, 1)
SMALL_IMAGE_SHAPE = (1, 8, 8)
VALID_SHAPES = (SCALAR_SHAPE, SMALL_IMAGE_SHAPE)


@dataclass(frozen=True)
class GaussianPrior:
    mu0: float = 0.0
    var0: float = 0.01

    def __post_init__(self) -> None:
        if not self.var0 > 0:
            raise ValueError(f"Prior variance must be > 0, got {self.var0}")


class AnalyticDenoiser(DenoiserModel):
    """ε*(x_t, t) = sqrt(1-ᾱ_t) (x_t - sqrt(ᾱ_t) μ0) / (ᾱ_t σ0² + 1 - ᾱ_t)."""

    def __init__(self, prior: GaussianPrior, schedule: NoiseSchedule) -> None:
        super().__init__()
        self.prior = prior
        self.schedule = schedule

    def predict_noise(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        alpha_bar = self.schedule.alpha_bars_at(t).to(dtype=x_t.dtype, device=x_t.device)
        alpha_bar = alpha_bar.view(-1, *([1] * (x_t.dim() - 1)))
        centered = x_t - alpha_bar.sqrt() * self.prior.mu0
        return (1.0 - alpha_bar).sqrt() * centered / (alpha_bar * self.prior.var0 + 1.0 - alpha_bar)

    def descriptor(self) -> dict[str, Any]:
        return {"backend": BACKEND_ANALYTIC, "mu0": self.prior.mu0, "var0": self.prior.var0}


def analytic_denoiser(prior: GaussianPrior, schedule: NoiseSchedule) -> AnalyticDenoiser:
    return AnalyticDenoiser(prior, schedule).eval()


def analytic_posterior(prior: GaussianPrior, y: float, var: float) -> tuple[float, float]:
    """Conjugate posterior of x0 ~ N(μ0, σ0²) given y ~ N(x0, σ²).

    Returns:
        Tuple of (mean, variance)
    """
    if not var > 0:
        raise ValueError(f"Likelihood variance must be > 0, got {var}")
    total = prior.var0 + var
    mean = (var * prior.mu0 + prior.var0 * y) / total
    return mean, prior.var0 * var / total


@dataclass
class OracleReport:
    rho: float
    T: int
    N: int
    n_samples: int
    seed: int
    shape: list[int]
    y: float
    prior_mean: float
    prior_var: float
    empirical_mean: float
    empirical_var: float
    standard_error: float
    nominal_likelihood_var: float | None
    nominal_posterior_mean: float | None
    nominal_posterior_var: float | None
    distance_mean_to_prior: float
    distance_mean_to_y: float
    distance_mean_to_posterior: float | None
    mean_sq_distance_to_y: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def oracle_check(
    prior: GaussianPrior,
    y: float,
    cfg: SamplerConfig,
    n_samples: int,
    seed: int,
    schedule: NoiseSchedule,
    shape: tuple[int, int, int] = SCALAR_SHAPE,
) -> OracleReport:
    """Draw n_samples masked posterior samples (m = 1) with the analytic denoiser.

    The nominal posterior uses σ² = 1 / (2ρ), a heuristic correspondence that
    ignores the unknown estimation-precision term; it is absent when ρ = 0.
    Output clamping is disabled so moments are not truncated.
    """
    if tuple(shape) not in VALID_SHAPES:
        raise ValueError(f"shape must be one of {list(VALID_SHAPES)}, got {tuple(shape)}")
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    model = analytic_denoiser(prior, schedule)
    run_cfg = replace(
        cfg, n_samples=n_samples, clamp_output=False, batch_size=max(cfg.batch_size, n_samples)
    )
    obs = ObservationModel.unmasked(torch.full(tuple(shape), float(y), dtype=torch.float64))
    samples = torch.stack(mdps_sample_many(obs, model, schedule, run_cfg, Rng(seed)))

    values = samples.reshape(-1)
    mean = float(values.mean())
    var = float(values.var(unbiased=True))
    if cfg.rho > 0:
        nominal_var: float | None = 1.0 / (2.0 * cfg.rho)
        post_mean, post_var = analytic_posterior(prior, y, nominal_var)
    else:
        nominal_var = post_mean = post_var = None

    report = OracleReport(
        rho=cfg.rho,
        T=cfg.T,
        N=cfg.N,
        n_samples=n_samples,
        seed=seed,
        shape=list(shape),
        y=float(y),
        prior_mean=prior.mu0,
        prior_var=prior.var0,
        empirical_mean=mean,
        empirical_var=var,
        standard_error=math.sqrt(var / values.numel()),
        nominal_likelihood_var=nominal_var,
        nominal_posterior_mean=post_mean,
        nominal_posterior_var=post_var,
        distance_mean_to_prior=abs(mean - prior.mu0),
        distance_mean_to_y=abs(mean - y),
        distance_mean_to_posterior=None if post_mean is None else abs(mean - post_mean),
        mean_sq_distance_to_y=float(((values - y) ** 2).mean()),
    )
    _LOGGER.info(
        "Oracle rho=%g: mean=%.6f var=%.6g (prior %.4g, y %.4g, nominal posterior %s)",
        cfg.rho,
        mean,
        var,
        prior.mu0,
        y,
        post_mean,
    )
    return report
