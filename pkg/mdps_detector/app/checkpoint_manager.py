"""Versioned denoiser checkpoints (architecture, schedule, weights, training config)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from denoiser import DenoiserModel, TrainConfig, build_denoiser
from noise_schedule import NoiseSchedule, build_schedule

_LOGGER = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mdps-checkpoint"
CHECKPOINT_VERSION = 1
PERM_CHECKPOINT = 0o640


class CheckpointError(ValueError):
    """Checkpoint is unreadable or does not match the requested run."""


@dataclass
class Checkpoint:
    model: DenoiserModel
    schedule_params: dict[str, Any]
    train_config: TrainConfig
    category: str
    loss_history: list[float] = field(default_factory=list)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(**self.schedule_params)


class CheckpointManager:
    """Saves and loads checkpoints with a versioned header."""

    def __init__(self, path: Path) -> None:
        self.path = Path(path)

    def save(
        self,
        model: DenoiserModel,
        schedule_params: dict[str, Any],
        train_config: TrainConfig,
        category: str,
        loss_history: list[float] | None = None,
    ) -> Path:
        """Write a checkpoint atomically (temp file, then rename).

        Returns:
            Path of the written checkpoint
        """
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "architecture": model.descriptor(),
            "schedule": dict(schedule_params),
            "train_config": train_config.to_dict(),
            "category": category,
            "loss_history": [float(v) for v in (loss_history or [])],
            "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = self.path.with_suffix(self.path.suffix + ".tmp")
        torch.save(payload, tmp_path)
        tmp_path.replace(self.path)
        self.path.chmod(PERM_CHECKPOINT)
        _LOGGER.info("Saved checkpoint for category %s to %s", category, self.path)
        return self.path

    def load(
        self,
        expected_schedule: dict[str, Any] | None = None,
        expected_category: str | None = None,
        force: bool = False,
        device: torch.device | str = "cpu",
    ) -> Checkpoint:
        """Load and validate a checkpoint.

        Args:
            expected_schedule: Schedule parameters the run is configured with
            expected_category: Category the run detects on
            force: Accept a checkpoint trained on a different category
            device: Device to place the model on

        Raises:
            CheckpointError: If the file is missing, malformed, of another version, or
                does not match the expected schedule or category
        """
        if not self.path.exists():
            raise CheckpointError(f"Checkpoint not found: {self.path}")
        try:
            payload = torch.load(self.path, map_location="cpu", weights_only=True)
        except Exception as ex:
            _LOGGER.error("Failed to read checkpoint %s: %s", self.path, ex)
            raise CheckpointError(f"Unreadable checkpoint {self.path}: {ex}") from ex

        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{self.path} is not an MDPS checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"Checkpoint version {payload.get('version')} is not supported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        schedule_params = dict(payload["schedule"])
        if expected_schedule is not None and _schedule_key(schedule_params) != _schedule_key(
            expected_schedule
        ):
            raise CheckpointError(
                f"Checkpoint schedule {schedule_params} does not match configured {dict(expected_schedule)}"
            )
        category = payload["category"]
        if expected_category is not None and category != expected_category:
            if not force:
                raise CheckpointError(
                    f"Checkpoint was trained on category {category!r}, not {expected_category!r} "
                    "(use --force to override)"
                )
            _LOGGER.warning(
                "Using checkpoint of category %s for %s (forced)", category, expected_category
            )

        model = build_denoiser(payload["architecture"])
        model.load_state_dict(payload["state_dict"])
        model.to(device)
        model.eval()
        return Checkpoint(
            model=model,
            schedule_params=schedule_params,
            train_config=TrainConfig(**payload["train_config"]),
            category=category,
            loss_history=list(payload.get("loss_history", [])),
        )


def _schedule_key(params: dict[str, Any]) -> tuple[int, float, float]:
    return (int(params["t_max"]), float(params["beta_start"]), float(params["beta_end"]))
