"""Masked diffusion posterior sampling of normal images.

Pixels where the mask is 0 are trusted: their noise estimate is forced so that the
clean-image estimate equals the observation exactly. Pixels where the mask is 1 use
the prior denoiser plus a likelihood gradient that pulls the estimate towards the
observation with strength rho.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from denoiser import DenoiserModel, ddim_step, x0_from_eps
from noise_schedule import ImageTensor, MaskImage, NoiseSchedule, Rng

_LOGGER = logging.getLogger(__name__)


class GradientUnavailableError(RuntimeError):
    """The denoiser backend cannot provide a gradient with respect to its input."""


class SamplingError(RuntimeError):
    """A sampler intermediate became non-finite."""

    def __init__(self, step: int, t: int, what: str) -> None:
        super().__init__(f"Non-finite {what} at sampling step n={step} (t={t})")
        self.step = step
        self.t = t


@dataclass(frozen=True)
class ObservationModel:
    """Test image y (C, H, W, model space) and mask m (H, W).

    y equals the normal image where m = 0 and is a noisy version of it where m = 1.
    The noise scale of the anomalous region is folded into rho and never used here.
    """

    y: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self) -> None:
        if self.y.dim() != 3:
            raise ValueError(f"y must have shape (C, H, W), got {tuple(self.y.shape)}")
        if not torch.isfinite(self.y).all():
            raise ValueError("y contains non-finite values")
        if self.mask.dim() != 2 or tuple(self.mask.shape) != tuple(self.y.shape[1:]):
            raise ValueError(
                f"Mask shape {tuple(self.mask.shape)} does not match image {tuple(self.y.shape[1:])}"
            )
        if not ((self.mask == 0) | (self.mask == 1)).all():
            raise ValueError("Mask entries must be exactly 0 or 1")

    @classmethod
    def from_images(cls, image: ImageTensor, mask: MaskImage) -> ObservationModel:
        mask.check_matches(image)
        return cls(image.to_model_space().data, mask.data)

    @classmethod
    def unmasked(cls, y: torch.Tensor) -> ObservationModel:
        """Observation with every pixel suspected anomalous (m = 1)."""
        return cls(y, torch.ones(y.shape[1:], dtype=y.dtype, device=y.device))

    def with_mask(self, mask: torch.Tensor) -> ObservationModel:
        return ObservationModel(self.y, mask.to(dtype=self.y.dtype, device=self.y.device))


@dataclass
class SamplerConfig:
    T: int = 200
    N: int = 10
    rho: float = 100.0
    n_samples: int = 16
    restrict_guidance_to_mask: bool = False
    clamp_output: bool = True
    batch_size: int = 1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self, t_max: int | None = None) -> None:
        if self.N < 1 or self.T < 1:
            raise ValueError(f"T and N must be >= 1, got T={self.T}, N={self.N}")
        if self.T % self.N:
            raise ValueError(f"T={self.T} must be divisible by N={self.N}")
        if t_max is not None and self.T > t_max:
            raise ValueError(f"T={self.T} exceeds the schedule's T_max={t_max}")
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def steps(self) -> list[tuple[int, int, int]]:
        """(n, t, s) for n = N..1 with t = Tn/N and s = T(n-1)/N."""
        return [(n, self.T * n // self.N, self.T * (n - 1) // self.N) for n in range(self.N, 0, -1)]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class SamplerTrace:
    """Per-step x̂_0 snapshots and guidance-gradient norms for debugging."""

    records: list[dict[str, Any]] = field(default_factory=list)
    snapshots: dict[str, np.ndarray] = field(default_factory=dict)

    def record(
        self,
        first_sample: int,
        step: int,
        t: int,
        x0_hat: torch.Tensor,
        grad_norms: torch.Tensor | None,
    ) -> None:
        for offset in range(x0_hat.shape[0]):
            sample = first_sample + offset
            key = f"sample{sample:03d}_n{step:04d}"
            self.snapshots[key] = x0_hat[offset].detach().cpu().float().numpy()
            norm = None if grad_norms is None else float(grad_norms[offset])
            self.records.append({"sample": sample, "step": step, "t": t, "grad_norm": norm})

    def dump(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(directory / "trace.npz", **self.snapshots)
        (directory / "trace.json").write_text(json.dumps(self.records, indent=2), encoding="utf-8")
        _LOGGER.info("Wrote sampler trace with %d records to %s", len(self.records), directory)


def _guidance(
    x_t: torch.Tensor,
    t: int,
    y: torch.Tensor,
    mask: torch.Tensor,
    model: DenoiserModel,
    alpha_bar_t: float,
    restrict: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    """ε_θ(x_t, t) and ∇_{x_t} ||y - x̂_0^prior||², differentiating through the denoiser."""
    if not getattr(model, "supports_input_gradient", False):
        raise GradientUnavailableError(
            f"Denoiser {type(model).__name__} does not support input gradients"
        )
    with torch.enable_grad():
        x_in = x_t.detach().requires_grad_(True)
        eps_theta = model(x_in, t)
        residual = y - x0_from_eps(x_in, eps_theta, alpha_bar_t)
        if restrict:
            residual = residual * mask
        loss = residual.pow(2).sum()
        (grad,) = torch.autograd.grad(loss, x_in, allow_unused=True)
    if grad is None:
        raise GradientUnavailableError(
            f"Denoiser {type(model).__name__} output does not depend on its input"
        )
    return eps_theta.detach(), grad


def _posterior_eps(
    x_t: torch.Tensor,
    t: int,
    y: torch.Tensor,
    mask: torch.Tensor,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    rho: float,
    restrict: bool = False,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    alpha_bar_t = schedule.alpha_bar(t)
    eps_normal = (x_t - math.sqrt(alpha_bar_t) * y) / math.sqrt(1.0 - alpha_bar_t)
    anomalous = mask.bool()
    if not anomalous.any():
        return eps_normal, None

    grad_norms = None
    if rho > 0.0:
        eps_theta, grad = _guidance(x_t, t, y, mask, model, alpha_bar_t, restrict)
        eps_anomalous = eps_theta + rho * math.sqrt(1.0 - alpha_bar_t) * grad
        grad_norms = grad.flatten(1).norm(dim=1) if grad.dim() == 4 else grad.norm().reshape(1)
    else:
        with torch.no_grad():
            eps_anomalous = model(x_t, t)
    return torch.where(anomalous, eps_anomalous, eps_normal), grad_norms


def posterior_denoiser(
    x_t: torch.Tensor,
    t: int,
    obs: ObservationModel,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    rho: float,
    restrict_guidance_to_mask: bool = False,
) -> torch.Tensor:
    """Masked posterior noise estimate ε_φ.

    ε_φ = (1-m) ⊙ (x_t - sqrt(ᾱ_t) y) / sqrt(1-ᾱ_t)
        + m ⊙ (ε_θ(x_t, t) + ρ sqrt(1-ᾱ_t) ∇_{x_t} ||y - x̂_0^prior||²)

    Raises:
        GradientUnavailableError: If guidance is needed and the model has no input gradient
    """
    schedule.check_timestep(t, minimum=1)
    if x_t.shape[-3:] != obs.y.shape:
        raise ValueError(f"x_t shape {tuple(x_t.shape)} does not match y {tuple(obs.y.shape)}")
    eps_phi, _ = _posterior_eps(
        x_t, t, obs.y, obs.mask, model, schedule, rho, restrict_guidance_to_mask
    )
    return eps_phi


def _draw(rngs: list[Rng], like: torch.Tensor) -> torch.Tensor:
    return torch.stack([rng.normal(like.shape[1:], dtype=like.dtype, device=like.device) for rng in rngs])


def _run_chain(
    obs: ObservationModel,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    rngs: list[Rng],
    guided: bool,
    trace: SamplerTrace | None = None,
    first_sample: int = 0,
) -> torch.Tensor:
    """Run one chain per rng from the noised observation; returns (B, C, H, W)."""
    cfg.validate(schedule.t_max)
    y = obs.y.unsqueeze(0).expand(len(rngs), *obs.y.shape)
    mask = obs.mask.to(dtype=obs.y.dtype).reshape(1, 1, *obs.mask.shape)

    alpha_bar_T = schedule.alpha_bar(cfg.T)
    x = math.sqrt(alpha_bar_T) * y + math.sqrt(1.0 - alpha_bar_T) * _draw(rngs, y)

    for n, t, s in cfg.steps():
        grad_norms = None
        if guided:
            eps, grad_norms = _posterior_eps(
                x, t, y, mask, model, schedule, cfg.rho, cfg.restrict_guidance_to_mask
            )
        else:
            with torch.no_grad():
                eps = model(x, t)
        if not torch.isfinite(eps).all():
            raise SamplingError(n, t, "noise estimate")
        if trace is not None:
            trace.record(first_sample, n, t, x0_from_eps(x, eps, schedule.alpha_bar(t)), grad_norms)
        x = ddim_step(x, t, s, eps, schedule, noise=_draw(rngs, x)).detach()
        if not torch.isfinite(x).all():
            raise SamplingError(n, t, "sample")
        _LOGGER.debug("Sampling step n=%d t=%d -> s=%d done", n, t, s)

    if cfg.clamp_output:
        x = x.clamp(-1.0, 1.0)
    return x


def mdps_sample(
    obs: ObservationModel,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    rng: Rng,
    trace: SamplerTrace | None = None,
) -> torch.Tensor:
    """Draw one normal image from p(x_0 | y) by masked posterior sampling.

    Starts from the noised test image x_T = sqrt(ᾱ_T) y + sqrt(1-ᾱ_T) ε, not pure noise.

    Returns:
        Sample of shape (C, H, W) in model space
    """
    return _run_chain(obs, model, schedule, cfg, [rng], guided=True, trace=trace)[0]


def mdps_sample_many(
    obs: ObservationModel,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    rng: Rng,
    trace: SamplerTrace | None = None,
) -> list[torch.Tensor]:
    """Draw cfg.n_samples independent posterior samples.

    Sample j uses the stream rng.spawn(j), so results do not depend on batch_size
    or on evaluation order.
    """
    cfg.validate(schedule.t_max)
    streams = [rng.spawn(j) for j in range(cfg.n_samples)]
    samples: list[torch.Tensor] = []
    for start in range(0, cfg.n_samples, cfg.batch_size):
        chunk = streams[start : start + cfg.batch_size]
        batch = _run_chain(
            obs, model, schedule, cfg, chunk, guided=True, trace=trace, first_sample=start
        )
        samples.extend(batch.unbind(0))
    _LOGGER.debug("Drew %d posterior samples (mask coverage %.3f)", len(samples), float(obs.mask.mean()))
    return samples


def ddim_sample(
    y: torch.Tensor,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    rng: Rng,
) -> torch.Tensor:
    """Plain DDIM reverse chain started from the noised test image (no mask, no guidance)."""
    obs = ObservationModel.unmasked(y)
    return _run_chain(obs, model, schedule, cfg, [rng], guided=False)[0]


def ddim_sample_many(
    y: torch.Tensor,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    rng: Rng,
) -> list[torch.Tensor]:
    cfg.validate(schedule.t_max)
    obs = ObservationModel.unmasked(y)
    streams = [rng.spawn(j) for j in range(cfg.n_samples)]
    samples: list[torch.Tensor] = []
    for start in range(0, cfg.n_samples, cfg.batch_size):
        chunk = streams[start : start + cfg.batch_size]
        samples.extend(_run_chain(obs, model, schedule, cfg, chunk, guided=False).unbind(0))
    return samples
