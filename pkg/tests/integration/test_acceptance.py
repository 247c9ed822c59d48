"""Desk-scale acceptance run of the synthetic preset (slow)."""

import csv
import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))
from test_helpers import run_cli

pytestmark = [pytest.mark.integration, pytest.mark.slow]

PRESET = Path(__file__).resolve().parents[2] / "mdps_detector" / "config" / "synthetic.json"
# Frozen thresholds; see "Acceptance Thresholds" in README.md
IMAGE_AUROC_MIN = 0.90
PIXEL_AUROC_MIN = 0.85


@pytest.fixture
def preset(tmp_path):
    config = json.loads(PRESET.read_text())
    config["output_dir"] = str(tmp_path / "runs")
    config["dataset"]["root"] = str(tmp_path / "data")
    path = tmp_path / "synthetic.json"
    path.write_text(json.dumps(config))
    return path


@pytest.mark.timeout(3600)
def test_synthetic_benchmark_end_to_end(capsys, preset, tmp_path):
    code, _, error = run_cli(capsys, "generate-synthetic", "--config", preset)
    assert code == 0, error

    code, trained, error = run_cli(capsys, "train", "--config", preset)
    assert code == 0, error
    with open(Path(trained["run_dir"]) / "loss_history.csv", newline="") as handle:
        history = [float(row["loss"]) for row in csv.DictReader(handle)]
    assert history[-1] < history[0]

    code, detected, error = run_cli(capsys, "detect", "--config", preset, "--checkpoint", trained["checkpoint"])
    assert code == 0, error
    assert detected["image_auroc"] >= IMAGE_AUROC_MIN
    assert detected["pixel_auroc"] >= PIXEL_AUROC_MIN

    plan = tmp_path / "plan.json"
    plan.write_text(
        json.dumps(
            {
                "variants": ["full", "vanilla_ddim", "no_mask", "no_posterior"],
                "n_samples_values": [1, 16],
                "metric_modes": ["pixel_only", "perceptual_only", "combined"],
            }
        )
    )
    code, ablated, error = run_cli(
        capsys, "ablate", "--config", preset, "--checkpoint", trained["checkpoint"], "--plan", plan
    )
    assert code == 0, error
    with open(Path(ablated["run_dir"]) / "ablation.csv", newline="") as handle:
        points = {row["point"]: row for row in csv.DictReader(handle)}

    def auroc(point, kind):
        return float(points[point][f"{kind}_auroc"])

    for kind in ("image", "pixel"):
        assert auroc("full-rho=5", kind) >= auroc("vanilla_ddim-rho=0", kind) - 0.01
        assert auroc("full-rho=5", kind) >= auroc("no_mask-rho=5", kind) - 0.01
        assert auroc("full-rho=5", kind) >= auroc("no_posterior-rho=0", kind) - 0.01

    best_single = max(
        auroc("full-metric=pixel_only", "image"), auroc("full-metric=perceptual_only", "image")
    )
    assert auroc("full-metric=combined", "image") >= best_single - 0.02
    assert auroc("full-N_s=16", "image") >= auroc("full-N_s=1", "image") - 0.005
