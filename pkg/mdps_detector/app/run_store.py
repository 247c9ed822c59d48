"""Run directories, manifests and per-image artifact export."""

from __future__ import annotations

import csv
import json
import logging
import os
import re
from collections.abc import Iterable, Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import torch
from cryptography.hazmat.primitives import hashes
from PIL import Image

_LOGGER = logging.getLogger(__name__)

__version__ = "1.0.0"

NAME_RE = re.compile(r"^[a-zA-Z0-9_.-]{1,128}$")
PERM_FILE = 0o640
PERM_DIR = 0o750

MANIFEST_FILE = "manifest.json"
SCORES_FILE = "scores.jsonl"
TIMINGS_FILE = "timings.csv"
MAPS_DIR = "maps"
GT_DIR = "gt"
HEATMAP_DIR = "heatmaps"
MASK_DIR = "masks"
SCORE_FIELDS = (
    "image_id",
    "category",
    "label",
    "image_score",
    "lambda",
    "S",
    "N_s",
    "T",
    "N",
    "rho",
    "seed",
)
MAX_RUN_DIR_ATTEMPTS = 1000


def validate_name(name: str, what: str = "Name") -> str:
    """Validate a category or image id before it becomes part of a path.

    Returns the name unchanged; raises ValueError for anything else.
    """
    safe = os.path.basename(name)
    if safe != name or not NAME_RE.match(safe) or safe in (".", ".."):
        raise ValueError(f"{what} must be 1-128 chars and contain only a-z, 0-9, _, . or -: {name!r}")
    return safe


def safe_path(base: Path, name: str, *parts: str) -> Path:
    """Build a path under base from a validated name.

    Raises ValueError if the resolved path escapes base.
    """
    name = validate_name(name)
    result = (base / name / Path(*parts)) if parts else (base / name)
    resolved = result.resolve()
    base_resolved = base.resolve()
    if not str(resolved).startswith(str(base_resolved) + os.sep) and resolved != base_resolved:
        raise ValueError(f"Path escapes base directory: {result}")
    return result


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON encoding of a config dict."""
    digest = hashes.Hash(hashes.SHA256())
    digest.update(canonical_json(config).encode("utf-8"))
    return digest.finalize().hex()


def git_blob_digest(path: Path) -> str:
    """Content digest as git computes it for a blob: SHA-1 of 'blob <size>\\0' + bytes."""
    content = Path(path).read_bytes()
    digest = hashes.Hash(hashes.SHA1())  # nosec B303 - git object id, not a security hash
    digest.update(f"blob {len(content)}\0".encode())
    digest.update(content)
    return digest.finalize().hex()


def _make_dir(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    path.chmod(PERM_DIR)


def create_run_dir(
    output_dir: Path, command: str, cfg_hash: str, now: datetime | None = None
) -> Path:
    """Create <output_dir>/<command>-<UTC timestamp>-<hash8> exclusively.

    An existing directory is never reused; collisions get a numeric suffix.
    """
    output_dir = Path(output_dir)
    _make_dir(output_dir)
    stamp = (now or datetime.now(timezone.utc)).strftime("%Y%m%dT%H%M%SZ")
    base_name = validate_name(f"{command}-{stamp}-{cfg_hash[:8]}", "Run directory name")
    for attempt in range(MAX_RUN_DIR_ATTEMPTS):
        name = base_name if attempt == 0 else f"{base_name}-{attempt}"
        candidate = safe_path(output_dir, name)
        try:
            candidate.mkdir()
        except FileExistsError:
            continue
        candidate.chmod(PERM_DIR)
        _LOGGER.info("Created run directory %s", candidate)
        return candidate
    raise RuntimeError(f"Could not create a fresh run directory under {output_dir}")


class RunStore:
    """Writes the artifacts of one run directory."""

    def __init__(self, run_dir: Path) -> None:
        self.run_dir = Path(run_dir)
        if not self.run_dir.is_dir():
            raise ValueError(f"Run directory does not exist: {self.run_dir}")

    def _finish(self, path: Path) -> Path:
        path.chmod(PERM_FILE)
        return path

    def subdir(self, *parts: str) -> Path:
        path = self.run_dir.joinpath(*parts)
        _make_dir(path)
        return path

    def write_json(self, name: str, data: Any) -> Path:
        path = self.run_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return self._finish(path)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self.run_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
        return self._finish(path)

    def write_manifest(
        self,
        command: str,
        cfg_hash: str,
        seed: int,
        checkpoint: Path | None = None,
        extra: dict[str, Any] | None = None,
    ) -> Path:
        manifest = {
            "command": command,
            "config_hash": cfg_hash,
            "seed": seed,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "version": __version__,
            "checkpoint": str(checkpoint) if checkpoint else None,
            "checkpoint_digest": git_blob_digest(checkpoint) if checkpoint else None,
        }
        if extra:
            manifest.update(extra)
        return self.write_json(MANIFEST_FILE, manifest)

    def write_scores(self, records: Sequence[dict[str, Any]]) -> Path:
        """JSON-lines score records; no wall-clock fields so reruns are byte-identical."""
        path = self.run_dir / SCORES_FILE
        with open(path, "w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps({k: record[k] for k in SCORE_FIELDS}) + "\n")
        return self._finish(path)

    def write_timings(self, timings: Sequence[tuple[str, float]]) -> Path:
        return self.write_csv(
            TIMINGS_FILE, ("image_id", "wall_time_s"), [(i, f"{t:.6f}") for i, t in timings]
        )

    def save_image_artifacts(
        self,
        image_id: str,
        score_map: torch.Tensor,
        mask: torch.Tensor,
        gt_mask: torch.Tensor,
    ) -> None:
        """Heatmap (16-bit PNG), generated mask (1-bit PNG), raw map and gt mask (.npy)."""
        validate_name(image_id, "Image id")
        values = score_map.detach().cpu().double().numpy()
        np.save(safe_path(self.subdir(MAPS_DIR), f"{image_id}.npy"), values.astype(np.float32))
        np.save(
            safe_path(self.subdir(GT_DIR), f"{image_id}.npy"),
            gt_mask.detach().cpu().numpy().astype(np.uint8),
        )
        heatmap_path = safe_path(self.subdir(HEATMAP_DIR), f"{image_id}.png")
        Image.fromarray(_to_uint16(values)).save(heatmap_path)
        mask_path = safe_path(self.subdir(MASK_DIR), f"{image_id}.png")
        Image.fromarray(mask.detach().cpu().numpy().astype(bool)).save(mask_path)
        for path in (heatmap_path, mask_path):
            self._finish(path)


def _to_uint16(values: np.ndarray) -> np.ndarray:
    low, high = float(values.min()), float(values.max())
    if high <= low:
        return np.zeros(values.shape, dtype=np.uint16)
    scaled = (values - low) / (high - low) * 65535.0
    return np.round(scaled).astype(np.uint16)


def load_scores(run_dir: Path) -> list[dict[str, Any]]:
    path = Path(run_dir) / SCORES_FILE
    if not path.exists():
        raise ValueError(f"No {SCORES_FILE} in {run_dir}")
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
    if not records:
        raise ValueError(f"{path} contains no score records")
    return records


def load_map(run_dir: Path, image_id: str) -> np.ndarray:
    return np.load(safe_path(Path(run_dir) / MAPS_DIR, f"{validate_name(image_id)}.npy"))


def load_gt(run_dir: Path, image_id: str) -> np.ndarray:
    path = safe_path(Path(run_dir) / GT_DIR, f"{validate_name(image_id)}.npy")
    if not path.exists():
        raise ValueError(f"Ground-truth mask missing for image {image_id} in {run_dir}")
    return np.load(path)
