"""Test-set scoring shared by detect and the ablation runner."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from anomaly_scorer import AnomalyResult, DetectorComponents, detect_all
from dataset_loader import LabeledSample, stack_model_space
from metrics import PIXEL_MODE_EXACT, VALID_PIXEL_MODES, EvaluationRecord, RunMetrics, evaluate_run
from perception import VALID_MODES
from run_store import RunStore, validate_name

_LOGGER = logging.getLogger(__name__)

VARIANT_FULL = "full"
VARIANT_VANILLA_DDIM = "vanilla_ddim"
VARIANT_NO_MASK = "no_mask"
VARIANT_NO_POSTERIOR = "no_posterior"
VALID_VARIANTS = (VARIANT_FULL, VARIANT_VANILLA_DDIM, VARIANT_NO_MASK, VARIANT_NO_POSTERIOR)

ABLATION_DIR = "ablation"
ABLATION_CSV = "ablation.csv"
ABLATION_JSON = "ablation.json"
ABLATION_FIELDS = (
    "category",
    "variant",
    "image_auroc",
    "pixel_auroc",
    "N_s",
    "rho",
    "lambda",
    "T",
    "N",
    "seed",
    "wall_time_s",
    "point",
)


@dataclass
class ScoredTestSet:
    score_records: list[dict[str, Any]]
    evaluation: list[EvaluationRecord]
    timings: list[tuple[str, float]]
    metrics: RunMetrics

    @property
    def wall_time(self) -> float:
        return sum(t for _, t in self.timings)


def score_record(
    sample: LabeledSample, category: str, result: AnomalyResult, components: DetectorComponents, seed: int
) -> dict[str, Any]:
    cfg = components.sampler_cfg
    return {
        "image_id": sample.image_id,
        "category": category,
        "label": int(sample.is_anomalous),
        "image_score": result.image_score,
        "lambda": components.lam,
        "S": result.top_s,
        "N_s": cfg.n_samples,
        "T": cfg.T,
        "N": cfg.N,
        "rho": cfg.rho,
        "seed": seed,
    }


def score_test_set(
    samples: Sequence[LabeledSample],
    category: str,
    components: DetectorComponents,
    seed: int,
    store: RunStore | None = None,
    pixel_mode: str = PIXEL_MODE_EXACT,
    trace_dir: Path | None = None,
    device: str = "cpu",
) -> ScoredTestSet:
    """Detect on every test sample, optionally export artifacts, and evaluate.

    Image i draws from Rng(seed).spawn(i), so results follow sample order only.
    """
    if not samples:
        raise ValueError(f"No test images for category {category}")
    validate_name(category, "Category")
    images = list(stack_model_space(list(samples)).to(device).unbind(0))

    def export(index: int, result: AnomalyResult, elapsed: float) -> None:
        if store is not None:
            sample = samples[index]
            store.save_image_artifacts(sample.image_id, result.score_map, result.mask.data, sample.gt_mask.data)

    outcomes = detect_all(images, components, seed, on_result=export, trace_dir=trace_dir)

    score_records = []
    evaluation = []
    timings = []
    for sample, (result, elapsed) in zip(samples, outcomes):
        score_records.append(score_record(sample, category, result, components, seed))
        evaluation.append(
            EvaluationRecord(
                image_id=sample.image_id,
                category=category,
                anomalous=sample.is_anomalous,
                image_score=result.image_score,
                score_map=result.score_map.detach().cpu().double().numpy(),
                gt_mask=sample.gt_mask.data.numpy().astype("uint8"),
            )
        )
        timings.append((sample.image_id, elapsed))
    metrics = evaluate_run(evaluation, pixel_mode=pixel_mode)
    return ScoredTestSet(score_records, evaluation, timings, metrics)


@dataclass
class AblationPlan:
    """Variants run at the configured settings plus one-parameter sweeps of the full method."""

    variants: list[str] = field(default_factory=lambda: [VARIANT_FULL])
    rho_values: list[float] = field(default_factory=list)
    n_samples_values: list[int] = field(default_factory=list)
    lam_values: list[float] = field(default_factory=list)
    metric_modes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        for variant in self.variants:
            if variant not in VALID_VARIANTS:
                raise ValueError(f"Unknown ablation variant {variant!r}, must be one of {list(VALID_VARIANTS)}")
        if VARIANT_FULL not in self.variants:
            self.variants = [VARIANT_FULL, *self.variants]
        if any(rho < 0 for rho in self.rho_values):
            raise ValueError("rho_values must be >= 0")
        if any(n < 1 for n in self.n_samples_values):
            raise ValueError("n_samples_values must be >= 1")
        if any(not 0.0 <= lam <= 1.0 for lam in self.lam_values):
            raise ValueError("lam_values must be in [0, 1]")
        for mode in self.metric_modes:
            if mode not in VALID_MODES:
                raise ValueError(f"Unknown metric mode {mode!r}, must be one of {list(VALID_MODES)}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AblationPlan:
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"Unknown ablation plan key(s): {', '.join(unknown)}")
        return cls(**data)


def load_plan(path: Path) -> AblationPlan:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"Ablation plan not found: {path}")
    try:
        return AblationPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as ex:
        raise ValueError(f"Ablation plan {path} is not valid JSON: {ex}") from ex


def variant_components(base: DetectorComponents, variant: str) -> DetectorComponents:
    """vanilla_ddim: m = 1 and ρ = 0; no_mask: m = 1; no_posterior: ρ = 0."""
    if variant == VARIANT_FULL:
        return base
    if variant == VARIANT_VANILLA_DDIM:
        return replace(base.with_sampler_cfg(rho=0.0), use_mask=False)
    if variant == VARIANT_NO_MASK:
        return replace(base, use_mask=False)
    if variant == VARIANT_NO_POSTERIOR:
        return base.with_sampler_cfg(rho=0.0)
    raise ValueError(f"Unknown ablation variant {variant!r}")


def _format_value(value: Any) -> str:
    return f"{value:g}" if isinstance(value, float) else str(value)


def ablation_points(
    plan: AblationPlan, base: DetectorComponents
) -> list[tuple[str, str, DetectorComponents]]:
    """(variant, folder name, components) per point; folders are <variant>-<param>=<value>.

    Variant points are named by their effective ρ. A sweep point that lands on a
    folder already planned is dropped.
    """
    points: dict[str, tuple[str, DetectorComponents]] = {}

    def add(variant: str, param: str, value: Any, components: DetectorComponents) -> None:
        folder = f"{variant}-{param}={_format_value(value)}"
        points.setdefault(folder, (variant, components))

    for variant in plan.variants:
        components = variant_components(base, variant)
        add(variant, "rho", float(components.sampler_cfg.rho), components)
    for rho in plan.rho_values:
        add(VARIANT_FULL, "rho", float(rho), base.with_sampler_cfg(rho=float(rho)))
    for n_samples in plan.n_samples_values:
        add(VARIANT_FULL, "N_s", int(n_samples), base.with_sampler_cfg(n_samples=int(n_samples)))
    for lam in plan.lam_values:
        add(VARIANT_FULL, "lambda", float(lam), replace(base, lam=float(lam)))
    for mode in plan.metric_modes:
        add(VARIANT_FULL, "metric", mode, replace(base, diff_cfg=replace(base.diff_cfg, mode=mode)))
    return [(variant, folder, components) for folder, (variant, components) in points.items()]


def run_ablation(
    plan: AblationPlan,
    samples: Sequence[LabeledSample],
    category: str,
    components: DetectorComponents,
    seed: int,
    store: RunStore | None = None,
    pixel_mode: str = PIXEL_MODE_EXACT,
    device: str = "cpu",
) -> list[dict[str, Any]]:
    """Evaluate every plan point on the same test set and seed.

    With a store, each point gets ablation/<folder>/ with scores and metrics, and
    the table is written as ablation.csv plus an ablation.json mirror with the
    full configuration of each point.

    Returns:
        One row per point, keyed by ABLATION_FIELDS
    """
    if pixel_mode not in VALID_PIXEL_MODES:
        raise ValueError(f"pixel_mode must be one of {list(VALID_PIXEL_MODES)}, got {pixel_mode!r}")
    rows: list[dict[str, Any]] = []
    mirror: list[dict[str, Any]] = []
    for variant, folder, point in ablation_points(plan, components):
        _LOGGER.info("Ablation point %s", folder)
        scored = score_test_set(samples, category, point, seed, pixel_mode=pixel_mode, device=device)
        summary = scored.metrics.rows[0]
        cfg = point.sampler_cfg
        row = {
            "category": category,
            "variant": variant,
            "image_auroc": summary.image_auroc,
            "pixel_auroc": summary.pixel_auroc,
            "N_s": cfg.n_samples,
            "rho": cfg.rho,
            "lambda": point.lam,
            "T": cfg.T,
            "N": cfg.N,
            "seed": seed,
            "wall_time_s": round(scored.wall_time, 6),
            "point": folder,
        }
        rows.append(row)
        mirror.append(
            {
                **row,
                "use_mask": point.use_mask,
                "top_s": point.top_s,
                "sampler": cfg.to_dict(),
                "difference": point.diff_cfg.to_dict(),
            }
        )
        if store is not None:
            point_store = RunStore(store.subdir(ABLATION_DIR, folder))
            point_store.write_scores(scored.score_records)
            point_store.write_timings(scored.timings)
            point_store.write_json("metrics.json", scored.metrics.to_dict())

    if store is not None:
        store.write_csv(ABLATION_CSV, ABLATION_FIELDS, [[row[k] for k in ABLATION_FIELDS] for row in rows])
        store.write_json(ABLATION_JSON, {"plan": plan.to_dict(), "points": mirror})
    return rows
