"""Score maps, image scores, mask generation and the two-pass detection pipeline."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import torch
from denoiser import DenoiserModel
from noise_schedule import MaskImage, NoiseSchedule, Rng, to_unit_space
from perception import DifferenceConfig, FeatureBackbone, difference_map
from posterior_sampler import ObservationModel, SamplerConfig, SamplerTrace, mdps_sample_many

_LOGGER = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.3
FULL_SCALE_PIXELS = 224 * 224
FULL_SCALE_TOP_S = 500
PROPORTIONAL_TOP_S = 0.01

Sampler = Callable[..., list[torch.Tensor]]


class DetectionError(RuntimeError):
    """Sampling failed inside one pass of detect."""

    def __init__(self, pass_index: int, cause: Exception) -> None:
        super().__init__(f"Detection pass {pass_index} failed: {cause}")
        self.pass_index = pass_index


@dataclass
class AnomalyResult:
    score_map: torch.Tensor
    image_score: float
    mask: MaskImage
    lam: float
    top_s: int
    per_sample_maps: list[torch.Tensor] | None = None
    pass1_map: torch.Tensor | None = None


@dataclass
class DetectorComponents:
    """Everything detect needs besides the image and its random stream."""

    model: DenoiserModel
    schedule: NoiseSchedule
    backbone: FeatureBackbone | None
    sampler_cfg: SamplerConfig
    diff_cfg: DifferenceConfig
    lam: float = DEFAULT_LAMBDA
    top_s: int | None = None
    use_mask: bool = True
    keep_sample_maps: bool = False
    sampler: Sampler = mdps_sample_many

    def with_sampler_cfg(self, **changes) -> DetectorComponents:
        return replace(self, sampler_cfg=replace(self.sampler_cfg, **changes))


def average_score_map(maps: Sequence[torch.Tensor]) -> torch.Tensor:
    if not maps:
        raise ValueError("average_score_map needs at least one map")
    shape = maps[0].shape
    for index, score_map in enumerate(maps):
        if score_map.shape != shape:
            raise ValueError(
                f"Map {index} has shape {tuple(score_map.shape)}, expected {tuple(shape)}"
            )
    if len(maps) == 1:
        return maps[0]
    return torch.stack(list(maps)).mean(dim=0)


def default_top_s(n_pixels: int) -> int:
    if n_pixels >= FULL_SCALE_PIXELS:
        return FULL_SCALE_TOP_S
    return max(1, round(PROPORTIONAL_TOP_S * n_pixels))


def image_score(score_map: torch.Tensor, top_s: int) -> float:
    """Mean of the top_s largest entries (ties broken by flat index)."""
    if top_s < 1:
        raise ValueError(f"S must be >= 1, got {top_s}")
    values = score_map.detach().reshape(-1).double()
    ordered, _ = torch.sort(values, descending=True, stable=True)
    return float(ordered[: min(top_s, ordered.numel())].mean())


def generate_mask(score_map: torch.Tensor, lam: float) -> MaskImage:
    """m = D̄ > min + λ (max - min), strict."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    low = score_map.min()
    high = score_map.max()
    threshold = low + lam * (high - low)
    return MaskImage((score_map > threshold).to(torch.float32))


def _score_pass(
    pass_index: int,
    obs: ObservationModel,
    components: DetectorComponents,
    rng: Rng,
    trace: SamplerTrace | None = None,
) -> list[torch.Tensor]:
    extra = {} if trace is None else {"trace": trace}
    try:
        samples = components.sampler(
            obs, components.model, components.schedule, components.sampler_cfg, rng, **extra
        )
    except (RuntimeError, ValueError) as ex:
        _LOGGER.error("Sampling failed in detection pass %d: %s", pass_index, ex)
        raise DetectionError(pass_index, ex) from ex
    reconstructions = to_unit_space(torch.stack(list(samples)))
    maps = difference_map(
        reconstructions, to_unit_space(obs.y), components.backbone, components.diff_cfg
    )
    return list(maps.unbind(0))


def _trace_for(traces: dict[int, SamplerTrace] | None, pass_index: int) -> SamplerTrace | None:
    return None if traces is None else traces[pass_index]


def detect(
    y: torch.Tensor,
    components: DetectorComponents,
    rng: Rng,
    traces: dict[int, SamplerTrace] | None = None,
) -> AnomalyResult:
    """Two-pass detection of one model-space image y (C, H, W).

    Pass 1 samples with m = 1 everywhere and thresholds the averaged difference map
    into a mask; pass 2 samples again with that mask and provides the final map and
    image score. Passes draw from rng.spawn(1) and rng.spawn(2). With use_mask off
    only pass 1 runs and its map is final.

    When traces is given, a SamplerTrace per pass index is stored into it.
    """
    n_pixels = int(y.shape[-2] * y.shape[-1])
    top_s = components.top_s or default_top_s(n_pixels)

    obs = ObservationModel.unmasked(y)
    if traces is not None:
        traces.update({1: SamplerTrace(), 2: SamplerTrace()})
    pass1_maps = _score_pass(1, obs, components, rng.spawn(1), _trace_for(traces, 1))
    pass1_map = average_score_map(pass1_maps)
    if not components.use_mask:
        final_maps = pass1_maps
        mask = MaskImage(torch.ones(y.shape[-2:]))
        pass1_for_result = None
    else:
        mask = generate_mask(pass1_map, components.lam)
        _LOGGER.debug("Pass 1 mask covers %.2f%% of pixels", 100.0 * mask.coverage)
        final_maps = _score_pass(
            2, obs.with_mask(mask.data), components, rng.spawn(2), _trace_for(traces, 2)
        )
        pass1_for_result = pass1_map

    score_map = average_score_map(final_maps)
    return AnomalyResult(
        score_map=score_map,
        image_score=image_score(score_map, top_s),
        mask=mask,
        lam=components.lam,
        top_s=top_s,
        per_sample_maps=final_maps if components.keep_sample_maps else None,
        pass1_map=pass1_for_result,
    )


def detect_all(
    images: Sequence[torch.Tensor],
    components: DetectorComponents,
    seed: int,
    on_result: Callable[[int, AnomalyResult, float], None] | None = None,
    trace_dir: Path | None = None,
) -> list[tuple[AnomalyResult, float]]:
    """Run detect over a test set; image i uses Rng(seed).spawn(i).

    With trace_dir set, per-step sampler traces go to <trace_dir>/<index>/pass<n>.

    Returns:
        List of (result, wall time in seconds) in input order
    """
    master = Rng(seed)
    outcomes: list[tuple[AnomalyResult, float]] = []
    for index, y in enumerate(images):
        started = time.perf_counter()
        traces: dict[int, SamplerTrace] | None = {} if trace_dir is not None else None
        result = detect(y, components, master.spawn(index), traces)
        elapsed = time.perf_counter() - started
        if trace_dir is not None and traces:
            for pass_index, trace in traces.items():
                if trace.records:
                    trace.dump(trace_dir / f"{index:05d}" / f"pass{pass_index}")
        _LOGGER.info(
            "Image %d/%d: score=%.6f (%.2fs)", index + 1, len(images), result.image_score, elapsed
        )
        outcomes.append((result, elapsed))
        if on_result is not None:
            on_result(index, result, elapsed)
    return outcomes
