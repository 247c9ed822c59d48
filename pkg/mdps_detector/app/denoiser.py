"""Noise-prediction denoisers, their training objective and the DDIM reverse step."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from typing import Any

import torch
import torch.nn.functional as F
from noise_schedule import NoiseSchedule, Rng, sigma_from_alpha_bars
from torch import nn

_LOGGER = logging.getLogger(__name__)

BACKEND_COMPACT = "compact"
BACKEND_UNET = "unet"
VALID_BACKENDS = (BACKEND_COMPACT, BACKEND_UNET)

DIVERGENCE_PATIENCE = 3
RADICAND_TOLERANCE = 1e-12


class TrainingDivergedError(RuntimeError):
    """Training loss stayed non-finite for too many consecutive steps."""

    def __init__(self, step: int, history: list[float]) -> None:
        super().__init__(
            f"Training diverged: loss non-finite for {DIVERGENCE_PATIENCE} consecutive "
            f"steps, last at step {step}"
        )
        self.step = step
        self.history = history


class RadicandError(ValueError):
    """The DDIM direction coefficient sqrt(1 - ᾱ_s - σ_t²) is undefined."""


def timestep_embedding(timesteps: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=timesteps.device) / half
    )
    args = timesteps[:, None].float() * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
    return embedding


def _as_timesteps(t: int | torch.Tensor, batch: int, device: torch.device) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        steps = t.to(device=device, dtype=torch.long).reshape(-1)
        if steps.numel() == 1 and batch > 1:
            steps = steps.expand(batch)
        return steps
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


class DenoiserModel(nn.Module):
    """ε_θ(x_t, t): predicts the forward-process noise from a noised image.

    Accepts a single image (C, H, W) or a batch (B, C, H, W); the output has the
    input's shape. Subclasses implement predict_noise on batches.
    """

    supports_input_gradient = True

    def forward(self, x_t: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
        single = x_t.dim() == 3
        batch = x_t.unsqueeze(0) if single else x_t
        steps = _as_timesteps(t, batch.shape[0], batch.device)
        eps = self.predict_noise(batch, steps)
        return eps.squeeze(0) if single else eps

    def predict_noise(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def descriptor(self) -> dict[str, Any]:
        """Architecture descriptor; build_denoiser(descriptor) rebuilds the module."""
        raise NotImplementedError


class CompactDenoiser(DenoiserModel):
    """Five-convolution residual CNN with dilations and a channel-wise timestep embedding.

    Sized for 64x64 desk-scale runs; the dilations widen the receptive field without
    downsampling.
    """

    def __init__(
        self,
        in_channels: int = 3,
        hidden_channels: int = 64,
        embedding_dim: int = 128,
        dilations: tuple[int, ...] = (2, 4, 8),
    ) -> None:
        super().__init__()
        if len(dilations) > 3:
            raise ValueError("CompactDenoiser supports at most 3 hidden convolutions")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.embedding_dim = embedding_dim
        self.dilations = tuple(int(d) for d in dilations)

        self.time_mlp = nn.Sequential(
            nn.Linear(embedding_dim, hidden_channels * 2),
            nn.SiLU(),
            nn.Linear(hidden_channels * 2, hidden_channels * (len(self.dilations) + 1)),
        )
        self.conv_in = nn.Conv2d(in_channels, hidden_channels, 3, padding=1)
        self.hidden = nn.ModuleList(
            nn.Conv2d(hidden_channels, hidden_channels, 3, padding=d, dilation=d)
            for d in self.dilations
        )
        self.norms = nn.ModuleList(
            nn.GroupNorm(min(8, hidden_channels), hidden_channels)
            for _ in range(len(self.dilations) + 1)
        )
        self.conv_out = nn.Conv2d(hidden_channels, in_channels, 3, padding=1)

    def predict_noise(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.embedding_dim).to(x_t.dtype))
        shifts = emb.chunk(len(self.dilations) + 1, dim=1)

        h = self.conv_in(x_t)
        h = F.silu(self.norms[0](h + shifts[0][:, :, None, None]))
        for conv, norm, shift in zip(self.hidden, self.norms[1:], shifts[1:]):
            h = h + F.silu(norm(conv(h) + shift[:, :, None, None]))
        return self.conv_out(h)

    def descriptor(self) -> dict[str, Any]:
        return {
            "backend": BACKEND_COMPACT,
            "in_channels": self.in_channels,
            "hidden_channels": self.hidden_channels,
            "embedding_dim": self.embedding_dim,
            "dilations": list(self.dilations),
        }


def build_denoiser(descriptor: dict[str, Any]) -> DenoiserModel:
    """Construct an untrained denoiser from an architecture descriptor."""
    options = dict(descriptor)
    backend = options.pop("backend", None)
    if backend not in VALID_BACKENDS:
        raise ValueError(f"Invalid backend: {backend}. Must be one of {VALID_BACKENDS}")
    if backend == BACKEND_COMPACT:
        if "dilations" in options:
            options["dilations"] = tuple(options["dilations"])
        return CompactDenoiser(**options)

    from unet import UNetDenoiser

    if "channel_mult" in options:
        options["channel_mult"] = tuple(options["channel_mult"])
    if "attention_resolutions" in options:
        options["attention_resolutions"] = tuple(options["attention_resolutions"])
    return UNetDenoiser(**options)


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 5e-2
    t_max: int = 1000
    grad_clip: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive when set, got {self.grad_clip}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    model: DenoiserModel
    history: list[float] = field(default_factory=list)
    steps: int = 0


def training_loss(
    model: DenoiserModel,
    x0_batch: torch.Tensor,
    schedule: NoiseSchedule,
    rng: Rng | None = None,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-prediction objective: mean of (ε - ε_θ(sqrt(ᾱ_t) x0 + sqrt(1-ᾱ_t) ε, t))².

    t is drawn uniformly from {1..T_max} and ε from N(0, I) unless given.
    """
    if x0_batch.dim() != 4 or x0_batch.shape[0] == 0:
        raise ValueError(f"x0_batch must be a non-empty (B, C, H, W) tensor, got {tuple(x0_batch.shape)}")
    batch = x0_batch.shape[0]
    if (t is None or noise is None) and rng is None:
        raise ValueError("training_loss needs rng unless both t and noise are given")
    if t is None:
        t = rng.randint(1, schedule.t_max + 1, (batch,))
    if noise is None:
        noise = rng.normal(x0_batch.shape, dtype=x0_batch.dtype, device=x0_batch.device)

    alpha_bar = schedule.alpha_bars_at(t).to(dtype=x0_batch.dtype, device=x0_batch.device)
    alpha_bar = alpha_bar.view(batch, 1, 1, 1)
    x_t = alpha_bar.sqrt() * x0_batch + (1.0 - alpha_bar).sqrt() * noise
    predicted = model(x_t, t.to(x0_batch.device))
    return F.mse_loss(predicted, noise)


def train(
    model: DenoiserModel,
    images: torch.Tensor,
    config: TrainConfig,
    rng: Rng,
    schedule: NoiseSchedule,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train a denoiser on normal images only with AdamW.

    Args:
        model: Denoiser to train in place
        images: Normal training images in model space, shape (N, C, H, W)
        config: Training hyperparameters
        rng: Stream for shuffling, timesteps and noise
        schedule: Noise schedule; its T_max must equal config.t_max
        on_epoch: Called with (epoch, mean loss) after every epoch

    Returns:
        TrainResult with the trained model and per-epoch mean losses

    Raises:
        ValueError: If the dataset is empty or the schedule does not match
        TrainingDivergedError: If the loss is non-finite for 3 consecutive steps
    """
    if images.dim() != 4 or images.shape[0] == 0:
        raise ValueError("Training dataset is empty")
    if schedule.t_max != config.t_max:
        raise ValueError(
            f"Schedule has T_max={schedule.t_max} but config expects t_max={config.t_max}"
        )
    history: list[float] = []
    if config.epochs == 0:
        _LOGGER.info("epochs=0, returning the untrained model")
        return TrainResult(model=model, history=history, steps=0)

    device = next(model.parameters()).device
    images = images.to(device)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    n_images = images.shape[0]
    step = 0
    consecutive_bad = 0

    model.train()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_images)
        losses: list[float] = []
        for start in range(0, n_images, config.batch_size):
            step += 1
            batch = images[order[start : start + config.batch_size].to(device)]
            loss = training_loss(model, batch, schedule, rng)
            value = float(loss.detach())
            if not math.isfinite(value):
                consecutive_bad += 1
                _LOGGER.warning("Non-finite loss at step %d (epoch %d), skipping update", step, epoch)
                optimizer.zero_grad(set_to_none=True)
                if consecutive_bad >= DIVERGENCE_PATIENCE:
                    model.eval()
                    raise TrainingDivergedError(step, history)
                continue
            consecutive_bad = 0
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            losses.append(value)

        mean_loss = sum(losses) / len(losses) if losses else float("nan")
        history.append(mean_loss)
        _LOGGER.info("Trained epoch %d/%d: mean loss=%.6f", epoch, config.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)

    model.eval()
    return TrainResult(model=model, history=history, steps=step)


def x0_from_eps(x_t: torch.Tensor, eps: torch.Tensor, alpha_bar_t: float) -> torch.Tensor:
    return (x_t - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)


def estimate_x0_prior(
    x_t: torch.Tensor, t: int, model: DenoiserModel, schedule: NoiseSchedule
) -> torch.Tensor:
    """One-shot clean-image estimate (x_t - sqrt(1-ᾱ_t) ε_θ(x_t, t)) / sqrt(ᾱ_t)."""
    schedule.check_timestep(t, minimum=1)
    return x0_from_eps(x_t, model(x_t, t), schedule.alpha_bar(t))


def _direction_coefficient(alpha_bar_s: float, sigma: float) -> float:
    radicand = 1.0 - alpha_bar_s - sigma * sigma
    if radicand < -RADICAND_TOLERANCE:
        raise RadicandError(
            f"1 - alpha_bar_s - sigma^2 = {radicand:.3e} is negative; invalid schedule pair"
        )
    return math.sqrt(max(radicand, 0.0))


def _step_noise(
    like: torch.Tensor, rng: Rng | None, noise: torch.Tensor | None, sigma: float
) -> torch.Tensor | None:
    if noise is not None:
        if noise.shape != like.shape:
            raise ValueError(f"Noise shape {tuple(noise.shape)} does not match {tuple(like.shape)}")
        return noise
    if rng is not None:
        return rng.normal(like.shape, dtype=like.dtype, device=like.device)
    if sigma > 0.0:
        raise ValueError("A stochastic DDIM step needs rng or noise")
    return None


def ddim_step(
    x_t: torch.Tensor,
    t: int,
    s: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    rng: Rng | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Accelerated reverse step t -> s in two stages: x̂_0, then recombination.

    x̂_0 = (x_t - sqrt(1-ᾱ_t) ε̂) / sqrt(ᾱ_t)
    x_s = sqrt(ᾱ_s) x̂_0 + sqrt(1 - ᾱ_s - σ_t²) ε̂ + σ_t ε_t
    """
    if not 0 <= s < t:
        raise ValueError(f"ddim_step requires 0 <= s < t, got s={s}, t={t}")
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} does not match x_t {tuple(x_t.shape)}")
    alpha_bar_t = schedule.alpha_bar(t)
    alpha_bar_s = schedule.alpha_bar(s)
    sigma = sigma_from_alpha_bars(alpha_bar_s, alpha_bar_t)
    direction = _direction_coefficient(alpha_bar_s, sigma)
    step_noise = _step_noise(x_t, rng, noise, sigma)

    x0_hat = x0_from_eps(x_t, eps_hat, alpha_bar_t)
    x_s = math.sqrt(alpha_bar_s) * x0_hat + direction * eps_hat
    if step_noise is not None and sigma > 0.0:
        x_s = x_s + sigma * step_noise
    return x_s


def ddim_step_closed_form(
    x_t: torch.Tensor,
    t: int,
    s: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    rng: Rng | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Single-expression form of ddim_step; agrees with it to rounding."""
    if not 0 <= s < t:
        raise ValueError(f"ddim_step requires 0 <= s < t, got s={s}, t={t}")
    alpha_bar_t = schedule.alpha_bar(t)
    alpha_bar_s = schedule.alpha_bar(s)
    sigma = sigma_from_alpha_bars(alpha_bar_s, alpha_bar_t)
    direction = _direction_coefficient(alpha_bar_s, sigma)
    step_noise = _step_noise(x_t, rng, noise, sigma)

    x_s = math.sqrt(alpha_bar_s / alpha_bar_t) * (x_t - math.sqrt(1.0 - alpha_bar_t) * eps_hat)
    x_s = x_s + direction * eps_hat
    if step_noise is not None and sigma > 0.0:
        x_s = x_s + sigma * step_noise
    return x_s
