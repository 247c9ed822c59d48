"""Image containers, the diffusion noise schedule and seeded random streams."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

_LOGGER = logging.getLogger(__name__)

RANGE_UNIT = "unit"  # [0, 1], raw pixels
RANGE_MODEL = "model"  # [-1, 1], denoiser input space
VALUE_RANGES = {RANGE_UNIT: (0.0, 1.0), RANGE_MODEL: (-1.0, 1.0)}
RANGE_SLACK = 1e-6

DEFAULT_T_MAX = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class ImageTensor:
    """Channel-first image with a declared value range."""

    data: torch.Tensor
    value_range: str = RANGE_MODEL

    def __post_init__(self) -> None:
        if self.value_range not in VALUE_RANGES:
            raise ValueError(
                f"value_range must be one of {sorted(VALUE_RANGES)}, got {self.value_range!r}"
            )
        if self.data.dim() != 3 or min(self.data.shape) < 1:
            raise ValueError(f"Image must have shape (C, H, W) with C, H, W >= 1, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("Image contains non-finite values")
        low, high = VALUE_RANGES[self.value_range]
        if self.data.min() < low - RANGE_SLACK or self.data.max() > high + RANGE_SLACK:
            raise ValueError(
                f"Image values [{float(self.data.min()):.6f}, {float(self.data.max()):.6f}] "
                f"outside declared {self.value_range} range [{low}, {high}]"
            )

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])

    def to_model_space(self) -> ImageTensor:
        if self.value_range == RANGE_MODEL:
            return self
        return ImageTensor(to_model_space(self.data), RANGE_MODEL)

    def to_unit_space(self) -> ImageTensor:
        if self.value_range == RANGE_UNIT:
            return self
        return ImageTensor(to_unit_space(self.data), RANGE_UNIT)


@dataclass(frozen=True)
class MaskImage:
    """Binary (H, W) map; 1 marks a suspected anomaly, 0 a trusted normal pixel."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.dim() != 2:
            raise ValueError(f"Mask must have shape (H, W), got {tuple(self.data.shape)}")
        if not ((self.data == 0) | (self.data == 1)).all():
            raise ValueError("Mask entries must be exactly 0 or 1")

    @classmethod
    def zeros(cls, height: int, width: int) -> MaskImage:
        return cls(torch.zeros(height, width))

    @classmethod
    def ones(cls, height: int, width: int) -> MaskImage:
        return cls(torch.ones(height, width))

    def check_matches(self, image: ImageTensor) -> None:
        if tuple(self.data.shape) != image.spatial_shape:
            raise ValueError(
                f"Mask shape {tuple(self.data.shape)} does not match image {image.spatial_shape}"
            )

    @property
    def coverage(self) -> float:
        return float(self.data.float().mean())


def to_model_space(data: torch.Tensor) -> torch.Tensor:
    return data * 2.0 - 1.0


def to_unit_space(data: torch.Tensor) -> torch.Tensor:
    return (data + 1.0) / 2.0


@dataclass(frozen=True)
class NoiseSchedule:
    """β(1..T_max) and ᾱ(0..T_max), with ᾱ_0 = 1 so the last reverse step is exact."""

    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ValueError("Every beta must lie in the open interval (0, 1)")
        alpha_bars = np.empty(betas.size + 1, dtype=np.float64)
        alpha_bars[0] = 1.0
        # Sequential product keeps ᾱ_t = ᾱ_{t-1}(1 - β_t) exact to rounding.
        for t, beta in enumerate(betas, start=1):
            alpha_bars[t] = alpha_bars[t - 1] * (1.0 - beta)
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @classmethod
    def from_betas(cls, betas) -> NoiseSchedule:
        return cls(np.asarray(betas, dtype=np.float64))

    @property
    def t_max(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alpha_bars[t])

    def check_timestep(self, t: int, minimum: int = 0) -> None:
        if not minimum <= t <= self.t_max:
            raise ValueError(f"Timestep {t} out of range [{minimum}, {self.t_max}]")

    def alpha_bars_at(self, t: torch.Tensor) -> torch.Tensor:
        """Gather ᾱ for a tensor of integer timesteps."""
        table = torch.from_numpy(np.asarray(self.alpha_bars))
        return table[t.long().cpu()]


def build_schedule(
    t_max: int = DEFAULT_T_MAX,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a linear β schedule from beta_start to beta_end over t_max steps.

    Raises:
        ValueError: If t_max < 1 or the betas are not 0 < beta_start <= beta_end < 1
    """
    if isinstance(t_max, bool) or not isinstance(t_max, int) or t_max < 1:
        raise ValueError(f"t_max must be a positive integer, got {t_max!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"Betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if t_max == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    schedule = NoiseSchedule(betas)
    _LOGGER.debug(
        "Built linear schedule: T_max=%d, beta=[%g, %g], alpha_bar_T=%.6g",
        t_max,
        beta_start,
        beta_end,
        schedule.alpha_bars[-1],
    )
    return schedule


def sigma_t(schedule: NoiseSchedule, s: int, t: int) -> float:
    """Stochastic DDIM noise scale for the step t -> s.

    σ_t = sqrt((1 - ᾱ_s) / (1 - ᾱ_t)) * sqrt(1 - ᾱ_t / ᾱ_s), zero when ᾱ_s = 1.
    """
    if s >= t:
        raise ValueError(f"sigma_t requires s < t, got s={s}, t={t}")
    schedule.check_timestep(s)
    schedule.check_timestep(t)
    return sigma_from_alpha_bars(schedule.alpha_bar(s), schedule.alpha_bar(t))


def sigma_from_alpha_bars(alpha_bar_s: float, alpha_bar_t: float) -> float:
    if alpha_bar_s >= 1.0 or alpha_bar_t >= 1.0:
        return 0.0
    ratio = 1.0 - alpha_bar_t / alpha_bar_s
    if ratio <= 0.0:
        return 0.0
    return math.sqrt((1.0 - alpha_bar_s) / (1.0 - alpha_bar_t)) * math.sqrt(ratio)


class Rng:
    """Seeded random stream; single owner, never shared across concurrent tasks."""

    def __init__(self, seed: int) -> None:
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
            raise ValueError(f"Seed must be an integer, got {seed!r}")
        seed = int(seed)
        if not 0 <= seed <= MAX_SEED:
            raise ValueError(f"Seed must be in [0, 2**64 - 1], got {seed}")
        self.seed = seed
        self._generator = torch.Generator(device="cpu")
        self._generator.manual_seed(seed)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"

    def spawn(self, index: int) -> Rng:
        """Derive an independent child stream from the seed and an index.

        The child depends only on (seed, index), never on how much of this stream
        has been consumed.
        """
        if index < 0:
            raise ValueError(f"Spawn index must be non-negative, got {index}")
        child = np.random.SeedSequence(self.seed, spawn_key=(int(index),))
        return Rng(int(child.generate_state(1, dtype=np.uint64)[0]))

    def normal(
        self,
        shape,
        dtype: torch.dtype = torch.float32,
        device: torch.device | str | None = None,
    ) -> torch.Tensor:
        draw = torch.randn(tuple(shape), generator=self._generator, dtype=torch.float32)
        return draw.to(dtype=dtype, device=device)

    def randint(self, low: int, high: int, shape) -> torch.Tensor:
        """Integers uniform in [low, high)."""
        return torch.randint(low, high, tuple(shape), generator=self._generator)

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self._generator)

    def uniform(self, shape) -> torch.Tensor:
        return torch.rand(tuple(shape), generator=self._generator)


def forward_noise(
    x0: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    rng: Rng | None = None,
    noise: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Noise x0 to level t: x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε.

    Args:
        x0: Clean image, any shape
        t: Timestep in [0, T_max]
        schedule: Noise schedule
        rng: Stream for ε; ignored when noise is given
        noise: Fixed ε of the same shape as x0

    Returns:
        Tuple of (x_t, ε)
    """
    if not torch.isfinite(x0).all():
        raise ValueError("x0 contains non-finite values")
    alpha_bar = schedule.alpha_bar(t)
    if noise is None:
        if rng is None:
            raise ValueError("forward_noise needs either rng or noise")
        noise = rng.normal(x0.shape, dtype=x0.dtype, device=x0.device)
    elif noise.shape != x0.shape:
        raise ValueError(f"Noise shape {tuple(noise.shape)} does not match x0 {tuple(x0.shape)}")
    if alpha_bar == 1.0:
        return x0.clone(), noise
    x_t = math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * noise
    return x_t, noise
