"""Command-line round trips through main.main in a temporary workspace."""

import csv
import json
import sys
from pathlib import Path

import main
import pytest

# Add integration tests directory to path for test_helpers
sys.path.insert(0, str(Path(__file__).parent))
from test_helpers import run_cli, write_config

pytestmark = pytest.mark.integration


def _detect(capsys, workspace, *extra):
    code, summary, error = run_cli(
        capsys, "detect", "--config", workspace["config"], "--checkpoint", workspace["checkpoint"], *extra
    )
    assert code == 0, error
    return summary


class TestGenerateAndTrain:
    def test_dataset_layout(self, workspace):
        category_dir = workspace["dir"] / "data" / "synthetic"
        assert len(list((category_dir / "train" / "good").iterdir())) == 4
        assert len(list((category_dir / "ground_truth").rglob("*_mask.png"))) == 3

    def test_train_run_artifacts(self, workspace):
        run_dir = workspace["checkpoint"].parent
        assert run_dir.name.startswith("train-")
        history = (run_dir / "loss_history.csv").read_text().splitlines()
        assert history[0] == "epoch,loss"
        assert len(history) == 3
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert len(manifest["checkpoint_digest"]) == 40
        assert json.loads((run_dir / "config.json").read_text())["seed"] == 0
        assert oct(workspace["checkpoint"].stat().st_mode)[-3:] == "640"

    def test_training_is_seeded(self, capsys, workspace):
        _, first, _ = run_cli(capsys, "train", "--config", workspace["config"], "--seed", "11")
        _, second, _ = run_cli(capsys, "train", "--config", workspace["config"], "--seed", "11")
        assert first["final_loss"] == second["final_loss"]
        assert first["run_dir"] != second["run_dir"]


class TestDetect:
    def test_summary_and_artifacts(self, capsys, workspace):
        summary = _detect(capsys, workspace)
        run_dir = Path(summary["run_dir"])
        assert summary["n_images"] == 5
        assert 0.0 <= summary["image_auroc"] <= 1.0
        for sub in ("heatmaps", "masks", "maps", "gt"):
            assert len(list((run_dir / sub).iterdir())) == 5
        scores = [json.loads(line) for line in (run_dir / "scores.jsonl").read_text().splitlines()]
        assert sorted(s["label"] for s in scores) == [0, 0, 1, 1, 1]
        assert scores[0]["image_id"] == "color_shift_002"
        assert {s["seed"] for s in scores} == {0}
        with open(run_dir / "metrics.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [row["category"] for row in rows] == ["synthetic", "average"]

    def test_rerun_is_byte_identical(self, capsys, workspace):
        first = Path(_detect(capsys, workspace)["run_dir"])
        second = Path(_detect(capsys, workspace)["run_dir"])
        assert first != second
        assert (first / "scores.jsonl").read_bytes() == (second / "scores.jsonl").read_bytes()

    def test_seed_override(self, capsys, workspace):
        run_dir = Path(_detect(capsys, workspace, "--seed", "5")["run_dir"])
        first = json.loads((run_dir / "scores.jsonl").read_text().splitlines()[0])
        assert first["seed"] == 5

    def test_trace_dump(self, capsys, workspace):
        run_dir = Path(_detect(capsys, workspace, "--trace")["run_dir"])
        assert (run_dir / "trace" / "00000" / "pass1" / "trace.json").exists()


def test_evaluate_recomputes_detect_metrics(capsys, workspace):
    detect = _detect(capsys, workspace)
    code, summary, error = run_cli(capsys, "evaluate", detect["run_dir"], "--config", workspace["config"])
    assert code == 0, error
    assert summary["run_dir"] != detect["run_dir"]
    row = summary["metrics"]["categories"][0]
    assert row["image_auroc"] == pytest.approx(detect["image_auroc"])
    assert row["pixel_auroc"] == pytest.approx(detect["pixel_auroc"])


def test_ablate(capsys, workspace):
    plan = workspace["dir"] / "plan.json"
    plan.write_text(json.dumps({"variants": ["full", "vanilla_ddim"], "metric_modes": ["pixel_only"]}))
    code, summary, error = run_cli(
        capsys,
        "ablate",
        "--config",
        workspace["config"],
        "--checkpoint",
        workspace["checkpoint"],
        "--plan",
        plan,
    )
    assert code == 0, error
    assert summary["points"] == 3
    run_dir = Path(summary["run_dir"])
    lines = (run_dir / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("category,variant,image_auroc,pixel_auroc,N_s,rho,lambda,T,N,seed,wall_time_s")
    assert len(lines) == 4


def test_oracle_check(capsys, workspace):
    code, summary, error = run_cli(capsys, "oracle-check", "--config", workspace["config"])
    assert code == 0, error
    reports = json.loads((Path(summary["run_dir"]) / "oracle.json").read_text())["reports"]
    assert [r["rho"] for r in reports] == [0.0, 10.0]
    assert set(summary["empirical_means"]) == {"0.0", "10.0"}


class TestErrors:
    def test_unknown_command(self, capsys):
        code, summary, error = run_cli(capsys, "serve")
        assert code == 1
        assert summary is None
        assert error["type"] == "CliError"

    def test_detect_needs_checkpoint(self, capsys, workspace):
        code, _, error = run_cli(capsys, "detect", "--config", workspace["config"])
        assert code == 1
        assert "--checkpoint" in error["error"]

    def test_ablate_needs_plan(self, capsys, workspace):
        code, _, error = run_cli(
            capsys, "ablate", "--config", workspace["config"], "--checkpoint", workspace["checkpoint"]
        )
        assert code == 1
        assert "--plan" in error["error"]

    def test_evaluate_needs_run_dir(self, capsys, workspace):
        code, _, error = run_cli(capsys, "evaluate", "--config", workspace["config"])
        assert code == 1
        assert "run directory" in error["error"]

    def test_unknown_config_key(self, capsys, workspace):
        path = write_config(workspace["dir"], "bad.json", colour="red")
        code, _, error = run_cli(capsys, "train", "--config", path)
        assert code == 1
        assert "colour" in error["error"]

    def test_missing_dataset(self, capsys, workspace):
        dataset = {"root": str(workspace["dir"] / "nowhere"), "category": "synthetic", "resize": 32, "center_crop": None}
        path = write_config(workspace["dir"], "missing.json", dataset=dataset)
        code, _, error = run_cli(capsys, "train", "--config", path)
        assert code == 1
        assert "not found" in error["error"]

    def test_category_mismatch_needs_force(self, capsys, workspace):
        dataset = {"root": str(workspace["dir"] / "data"), "category": "tiles", "resize": 32, "center_crop": None}
        path = write_config(workspace["dir"], "tiles.json", dataset=dataset)
        code, _, error = run_cli(capsys, "detect", "--config", path, "--checkpoint", workspace["checkpoint"])
        assert code == 1
        assert "--force" in error["error"]

        code, _, error = run_cli(
            capsys, "detect", "--config", path, "--checkpoint", workspace["checkpoint"], "--force"
        )
        assert code == 1
        assert "not found" in error["error"]

    def test_schedule_mismatch(self, capsys, workspace):
        path = write_config(
            workspace["dir"],
            "schedule.json",
            schedule={"t_max": 500},
            train={"epochs": 2, "t_max": 500},
        )
        code, _, error = run_cli(capsys, "detect", "--config", path, "--checkpoint", workspace["checkpoint"])
        assert code == 1
        assert "schedule" in error["error"]

    def test_cuda_preset_on_cpu_host(self, capsys, monkeypatch, workspace):
        monkeypatch.setattr(main.torch.cuda, "is_available", lambda: False)
        path = write_config(workspace["dir"], "cuda.json", device="cuda")
        code, _, error = run_cli(capsys, "train", "--config", path)
        assert code == 1
        assert '"device": "cpu"' in error["error"]
