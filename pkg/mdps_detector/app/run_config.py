"""Structured run configuration loaded from JSON."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from anomaly_scorer import DEFAULT_LAMBDA
from dataset_loader import DatasetSpec
from denoiser import BACKEND_COMPACT, VALID_BACKENDS, TrainConfig
from metrics import PIXEL_MODE_EXACT, VALID_PIXEL_MODES
from noise_schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T_MAX, build_schedule
from perception import DifferenceConfig
from posterior_sampler import SamplerConfig
from run_store import validate_name
from weights_manager import BACKBONE_TOY, validate_backbone_name

_LOGGER = logging.getLogger(__name__)

VALID_DEVICES = ("cpu", "cuda", "mps")


@dataclass
class ScheduleSection:
    t_max: int = DEFAULT_T_MAX
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self) -> None:
        build_schedule(self.t_max, self.beta_start, self.beta_end)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ModelSection:
    backend: str = BACKEND_COMPACT
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.backend not in VALID_BACKENDS:
            raise ValueError(f"model.backend must be one of {list(VALID_BACKENDS)}, got {self.backend!r}")

    def descriptor(self) -> dict[str, Any]:
        return {"backend": self.backend, **self.options}


@dataclass
class DatasetSection:
    root: str = "data"
    category: str = "synthetic"
    resize: int = 256
    center_crop: int | None = 224

    def __post_init__(self) -> None:
        self.spec("train")

    def spec(self, split: str) -> DatasetSpec:
        return DatasetSpec(
            root=Path(self.root),
            category=self.category,
            split=split,
            resize=self.resize,
            center_crop=self.center_crop,
        )


@dataclass
class SyntheticSection:
    n_train: int = 100
    n_test_normal: int = 20
    n_test_anomalous: int = 30
    size: int = 64

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_test_normal < 1 or self.n_test_anomalous < 0:
            raise ValueError("synthetic counts must be >= 1 (n_test_anomalous >= 0)")


@dataclass
class ScoringSection:
    lam: float = DEFAULT_LAMBDA
    top_s: int | None = None
    pixel_mode: str = PIXEL_MODE_EXACT

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"scoring.lam must be in [0, 1], got {self.lam}")
        if self.top_s is not None and self.top_s < 1:
            raise ValueError(f"scoring.top_s must be >= 1, got {self.top_s}")
        if self.pixel_mode not in VALID_PIXEL_MODES:
            raise ValueError(f"scoring.pixel_mode must be one of {list(VALID_PIXEL_MODES)}")


@dataclass
class OracleSection:
    mu0: float = 0.0
    var0: float = 0.01
    y: float = 1.0
    n_samples: int = 2000
    T: int = 1000
    N: int = 50
    rho_values: list[float] = field(default_factory=lambda: [0.0, 1.0, 10.0, 50.0])
    shape: list[int] = field(default_factory=lambda: [1, 1, 1])


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    difference: DifferenceConfig = field(default_factory=DifferenceConfig)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    seed: int = 0
    output_dir: str = "runs"
    backbone: str = BACKBONE_TOY
    offline: bool = False
    cache_dir: str | None = None
    device: str = "cpu"

    def __post_init__(self) -> None:
        validate_backbone_name(self.backbone)
        validate_name(self.dataset.category, "Category")
        if self.device not in VALID_DEVICES:
            raise ValueError(f"device must be one of {list(VALID_DEVICES)}, got {self.device!r}")
        if self.train.t_max != self.schedule.t_max:
            raise ValueError(
                f"train.t_max={self.train.t_max} must equal schedule.t_max={self.schedule.t_max}"
            )
        self.sampler.validate(self.schedule.t_max)
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        return _build(cls, data, "")


def _build(cls: type, data: Any, path: str) -> Any:
    """Instantiate a config dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ValueError(f"Config section {path or '<root>'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        dotted = ", ".join(f"{path}{key}" for key in unknown)
        raise ValueError(f"Unknown config key(s): {dotted}")
    kwargs = {}
    for name, value in data.items():
        section = _SECTIONS.get(name) if cls is RunConfig else None
        kwargs[name] = _build(section, value, f"{name}.") if section else value
    try:
        return cls(**kwargs)
    except TypeError as ex:
        raise ValueError(f"Invalid config section {path or '<root>'}: {ex}") from ex


_SECTIONS: dict[str, type] = {
    "schedule": ScheduleSection,
    "model": ModelSection,
    "train": TrainConfig,
    "dataset": DatasetSection,
    "synthetic": SyntheticSection,
    "sampler": SamplerConfig,
    "difference": DifferenceConfig,
    "scoring": ScoringSection,
    "oracle": OracleSection,
}


def load_config(path: str | Path) -> RunConfig:
    """Read a RunConfig from a JSON file.

    Raises:
        ValueError: If the file is missing, not valid JSON, or has unknown or invalid keys
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as ex:
        raise ValueError(f"Config file {path} is not valid JSON: {ex}") from ex
    config = RunConfig.from_dict(data)
    _LOGGER.debug("Loaded config from %s", path)
    return config


def apply_overrides(
    config: RunConfig,
    seed: int | None = None,
    offline: bool | None = None,
    output_dir: str | None = None,
) -> RunConfig:
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
    if offline:
        changes["offline"] = True
    if output_dir is not None:
        changes["output_dir"] = output_dir
    return replace(config, **changes) if changes else config
