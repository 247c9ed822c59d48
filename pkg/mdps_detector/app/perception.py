"""Multi-stage feature backbones and the pixel + perceptual difference map."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

_LOGGER = logging.getLogger(__name__)

MODE_COMBINED = "combined"
MODE_PIXEL_ONLY = "pixel_only"
MODE_PERCEPTUAL_ONLY = "perceptual_only"
VALID_MODES = (MODE_COMBINED, MODE_PIXEL_ONLY, MODE_PERCEPTUAL_ONLY)

NORM_EPSILON = 1e-12
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

TOY_SEED = 20240101
TOY_CHANNELS = (16, 32, 64)


class FeatureBackbone(nn.Module):
    """Feature extractor returning one map per stage, coarsening with depth.

    extract() takes unit-range images, (C, H, W) or (B, C, H, W), and returns a list
    of (B, C_i, H_i, W_i) maps; stage indices used by DifferenceConfig are 1-based.
    """

    n_stages: int = 0

    def stage_outputs(self, images: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    @torch.no_grad()
    def extract(self, images: torch.Tensor) -> list[torch.Tensor]:
        batch = images.unsqueeze(0) if images.dim() == 3 else images
        return self.stage_outputs(batch)


class ToyBackbone(FeatureBackbone):
    """Fixed random strided convolutions (3 stages); needs no download."""

    def __init__(self, in_channels: int = 3, channels: tuple[int, ...] = TOY_CHANNELS) -> None:
        super().__init__()
        generator = torch.Generator().manual_seed(TOY_SEED)
        self.n_stages = len(channels)
        previous = in_channels
        for index, width in enumerate(channels):
            fan_in = previous * 9
            weight = torch.randn(width, previous, 3, 3, generator=generator) / fan_in**0.5
            bias = torch.randn(width, generator=generator) * 0.1
            self.register_buffer(f"weight{index}", weight)
            self.register_buffer(f"bias{index}", bias)
            previous = width

    def stage_outputs(self, images: torch.Tensor) -> list[torch.Tensor]:
        features = []
        h = images
        for index in range(self.n_stages):
            weight = getattr(self, f"weight{index}").to(h.dtype)
            bias = getattr(self, f"bias{index}").to(h.dtype)
            h = torch.tanh(F.conv2d(h, weight, bias, stride=2, padding=1))
            features.append(h)
        return features


class TorchvisionBackbone(FeatureBackbone):
    """ImageNet ResNet trunk; stages are the outputs of layer1..layer4."""

    n_stages = 4

    def __init__(self, trunk: nn.Module) -> None:
        super().__init__()
        self.trunk = trunk.eval()
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def stage_outputs(self, images: torch.Tensor) -> list[torch.Tensor]:
        trunk = self.trunk
        h = (images - self.mean.to(images.dtype)) / self.std.to(images.dtype)
        h = trunk.maxpool(trunk.relu(trunk.bn1(trunk.conv1(h))))
        features = []
        for layer in (trunk.layer1, trunk.layer2, trunk.layer3, trunk.layer4):
            h = layer(h)
            features.append(h)
        return features


@dataclass
class DifferenceConfig:
    eta: float = 1.0
    stages: tuple[int, ...] = (1, 2, 3)
    mode: str = MODE_COMBINED

    def __post_init__(self) -> None:
        self.stages = tuple(int(s) for s in self.stages)
        self.validate()

    def validate(self) -> None:
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if not self.stages:
            raise ValueError("stages must not be empty")
        if min(self.stages) < 1:
            raise ValueError(f"Stage indices are 1-based, got {list(self.stages)}")
        if self.mode not in VALID_MODES:
            raise ValueError(f"mode must be one of {list(VALID_MODES)}, got {self.mode!r}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["stages"] = list(self.stages)
        return data


def cosine_distance_map(features_a: torch.Tensor, features_b: torch.Tensor) -> torch.Tensor:
    """1 - cos over the channel axis of (B, C, h, w) maps; 0 where either vector is ~0."""
    dot = (features_a * features_b).sum(dim=1)
    norm_a = features_a.norm(dim=1)
    norm_b = features_b.norm(dim=1)
    degenerate = (norm_a < NORM_EPSILON) | (norm_b < NORM_EPSILON)
    cosine = dot / (norm_a * norm_b).clamp_min(NORM_EPSILON)
    distance = (1.0 - cosine).clamp_min(0.0)
    return torch.where(degenerate, torch.zeros_like(distance), distance)


def difference_map(
    x0: torch.Tensor,
    y: torch.Tensor,
    backbone: FeatureBackbone | None,
    cfg: DifferenceConfig,
) -> torch.Tensor:
    """Pixel-wise difference between a reconstruction and the observed image.

    D(k) = η ‖y_k - x0_k‖₁ + Σ_{i∈J} (1 - cos(F_i(x0)_k, F_i(y)_k)), stage maps
    upsampled bilinearly to the input size. Inputs are unit-range images of equal
    shape, (C, H, W) or (B, C, H, W); y may also be a single image broadcast over a
    batch of x0.

    Returns:
        Non-negative map of shape (H, W), or (B, H, W) for batched x0

    Raises:
        ValueError: On shape mismatch, or when the backbone has fewer stages than max(J)
    """
    single = x0.dim() == 3
    x0_batch = x0.unsqueeze(0) if single else x0
    y_batch = y.unsqueeze(0) if y.dim() == 3 else y
    if x0_batch.shape[1:] != y_batch.shape[1:]:
        raise ValueError(f"Shape mismatch: x0 {tuple(x0.shape)} vs y {tuple(y.shape)}")
    if y_batch.shape[0] not in (1, x0_batch.shape[0]):
        raise ValueError(f"Batch mismatch: x0 {tuple(x0.shape)} vs y {tuple(y.shape)}")
    y_batch = y_batch.expand_as(x0_batch)
    height, width = x0_batch.shape[-2:]

    result = torch.zeros(x0_batch.shape[0], height, width, dtype=x0_batch.dtype, device=x0_batch.device)
    if cfg.mode != MODE_PERCEPTUAL_ONLY:
        result = result + cfg.eta * (y_batch - x0_batch).abs().sum(dim=1)

    if cfg.mode != MODE_PIXEL_ONLY:
        if backbone is None:
            raise ValueError(f"Metric mode {cfg.mode!r} needs a feature backbone")
        if backbone.n_stages < max(cfg.stages):
            raise ValueError(
                f"Backbone has {backbone.n_stages} stages but stages {list(cfg.stages)} were requested"
            )
        features_x = backbone.extract(x0_batch)
        features_y = backbone.extract(y_batch)
        for stage in cfg.stages:
            distance = cosine_distance_map(features_x[stage - 1], features_y[stage - 1])
            if tuple(distance.shape[-2:]) != (height, width):
                distance = F.interpolate(
                    distance.unsqueeze(1), size=(height, width), mode="bilinear", align_corners=False
                ).squeeze(1)
            result = result + distance.to(result.dtype).clamp_min(0.0)

    return result.squeeze(0) if single else result
