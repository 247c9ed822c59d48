#!/usr/bin/env python3
"""Command-line entry point for the MDPS anomaly detector."""
from __future__ import annotations

import os
import sys

try:
    import logging

    LOG_LEVEL = os.getenv("LOG_LEVEL", "info").upper()
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )
    _EARLY_LOGGER = logging.getLogger(__name__)
except Exception as e:
    print(f"CRITICAL: Failed to set up logging: {e}", file=sys.stderr)
    sys.exit(1)

# Harden default permissions for new files
os.umask(0o077)

try:
    import argparse
    import json
    from pathlib import Path
    from typing import Any

    import torch
except Exception as e:
    _EARLY_LOGGER.critical("Failed to import core modules: %s", e, exc_info=True)
    sys.exit(1)

APP_ROOT = Path(__file__).resolve().parent
if str(APP_ROOT) not in sys.path:
    sys.path.insert(0, str(APP_ROOT))

try:
    from ablation import load_plan, run_ablation, score_test_set
    from anomaly_scorer import DetectorComponents
    from checkpoint_manager import CheckpointManager
    from dataset_loader import (
        SPLIT_TEST,
        SPLIT_TRAIN,
        generate_synthetic,
        load_dataset,
        stack_model_space,
        write_mvtec_layout,
    )
    from denoiser import build_denoiser, train
    from gaussian_oracle import GaussianPrior, oracle_check
    from metrics import EvaluationRecord, RunMetrics, evaluate_run
    from noise_schedule import Rng, build_schedule
    from perception import MODE_PIXEL_ONLY
    from posterior_sampler import SamplerConfig
    from run_config import RunConfig, apply_overrides, load_config
    from run_store import (
        RunStore,
        config_hash,
        create_run_dir,
        load_gt,
        load_map,
        load_scores,
    )
    from weights_manager import fetch_pretrained
except Exception as e:
    _EARLY_LOGGER.critical("Failed to import application modules: %s", e, exc_info=True)
    sys.exit(1)

_LOGGER = _EARLY_LOGGER

COMMANDS = ("train", "detect", "evaluate", "ablate", "oracle-check", "generate-synthetic")
CHECKPOINT_FILE = "checkpoint.pt"
CONFIG_FILE = "config.json"
LOSS_HISTORY_FILE = "loss_history.csv"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
ORACLE_FILE = "oracle.json"
TRACE_DIR = "trace"
METRICS_FIELDS = ("category", "image_auroc", "pixel_auroc", "n_images", "n_anomalous")


class CliError(ValueError):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdps", description="Masked diffusion posterior sampling anomaly detector")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("run_dir", nargs="?", help="Detect run directory (evaluate only)")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="Override the configured seed")
    parser.add_argument("--offline", action="store_true", help="Never download backbone weights")
    parser.add_argument("--output", help="Override the configured output directory")
    parser.add_argument("--checkpoint", type=Path, help="Trained checkpoint (detect, ablate)")
    parser.add_argument("--force", action="store_true", help="Accept a checkpoint of another category")
    parser.add_argument("--trace", action="store_true", help="Dump per-step sampler traces (detect)")
    parser.add_argument("--plan", type=Path, help="JSON ablation plan (ablate)")
    parser.add_argument("--log-level", choices=("debug", "info", "warning", "error"))
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(config, seed=args.seed, offline=args.offline, output_dir=args.output)


def _device(config: RunConfig) -> torch.device:
    if config.device == "cuda" and not torch.cuda.is_available():
        raise ValueError('device is cuda but CUDA is not available; set "device": "cpu" in the config')
    if config.device == "mps" and not torch.backends.mps.is_available():
        raise ValueError('device is mps but MPS is not available; set "device": "cpu" in the config')
    return torch.device(config.device)


def _start_run(command: str, config: RunConfig) -> tuple[RunStore, str]:
    cfg_hash = config_hash(config.to_dict())
    store = RunStore(create_run_dir(Path(config.output_dir), command, cfg_hash))
    store.write_json(CONFIG_FILE, config.to_dict())
    return store, cfg_hash


def _write_metrics(store: RunStore, metrics: RunMetrics) -> None:
    store.write_csv(
        METRICS_CSV,
        METRICS_FIELDS,
        [[getattr(row, name) for name in METRICS_FIELDS] for row in metrics.table()],
    )
    store.write_json(METRICS_JSON, metrics.to_dict())


def cmd_train(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Train one per-category denoiser on the normal training images."""
    samples = load_dataset(config.dataset.spec(SPLIT_TRAIN))
    device = _device(config)
    schedule_params = config.schedule.to_dict()
    schedule = build_schedule(**schedule_params)
    # Weight initialisation draws from the global torch generator
    torch.manual_seed(config.seed)
    model = build_denoiser(config.model.descriptor()).to(device)
    store, cfg_hash = _start_run("train", config)
    category = config.dataset.category
    history: list[float] = []

    def on_epoch(epoch: int, loss: float) -> None:
        history.append(loss)
        every = config.train.checkpoint_every
        if every and epoch % every == 0 and epoch < config.train.epochs:
            CheckpointManager(store.run_dir / f"checkpoint-epoch{epoch:05d}.pt").save(
                model, schedule_params, config.train, category, history
            )

    _LOGGER.info("Training %s denoiser on %d images of %s", config.model.backend, len(samples), category)
    result = train(model, stack_model_space(samples), config.train, Rng(config.seed), schedule, on_epoch)
    checkpoint = CheckpointManager(store.run_dir / CHECKPOINT_FILE).save(
        result.model, schedule_params, config.train, category, result.history
    )
    store.write_csv(
        LOSS_HISTORY_FILE, ("epoch", "loss"), [(i + 1, f"{v:.8g}") for i, v in enumerate(result.history)]
    )
    store.write_manifest("train", cfg_hash, config.seed, checkpoint=checkpoint)
    return {
        "command": "train",
        "run_dir": str(store.run_dir),
        "checkpoint": str(checkpoint),
        "epochs": len(result.history),
        "final_loss": result.history[-1] if result.history else None,
    }


def _components(
    config: RunConfig, args: argparse.Namespace, extra_modes: list[str] | None = None
) -> tuple[DetectorComponents, Path]:
    if args.checkpoint is None:
        raise CliError(f"{args.command} needs --checkpoint")
    device = _device(config)
    checkpoint = CheckpointManager(args.checkpoint).load(
        expected_schedule=config.schedule.to_dict(),
        expected_category=config.dataset.category,
        force=args.force,
        device=device,
    )
    backbone = None
    modes = {config.difference.mode, *(extra_modes or [])}
    if modes - {MODE_PIXEL_ONLY}:
        backbone = fetch_pretrained(config.backbone, config.cache_dir, config.offline).to(device)
    components = DetectorComponents(
        model=checkpoint.model,
        schedule=checkpoint.schedule(),
        backbone=backbone,
        sampler_cfg=config.sampler,
        diff_cfg=config.difference,
        lam=config.scoring.lam,
        top_s=config.scoring.top_s,
    )
    return components, args.checkpoint


def cmd_detect(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Score every test image and export heatmaps, masks, scores and metrics."""
    components, checkpoint = _components(config, args)
    samples = load_dataset(config.dataset.spec(SPLIT_TEST))
    store, cfg_hash = _start_run("detect", config)
    scored = score_test_set(
        samples,
        config.dataset.category,
        components,
        config.seed,
        store=store,
        pixel_mode=config.scoring.pixel_mode,
        trace_dir=store.run_dir / TRACE_DIR if args.trace else None,
        device=config.device,
    )
    store.write_scores(scored.score_records)
    store.write_timings(scored.timings)
    _write_metrics(store, scored.metrics)
    store.write_manifest(
        "detect", cfg_hash, config.seed, checkpoint=checkpoint, extra={"n_images": len(samples)}
    )
    row = scored.metrics.rows[0]
    return {
        "command": "detect",
        "run_dir": str(store.run_dir),
        "n_images": len(samples),
        "image_auroc": row.image_auroc,
        "pixel_auroc": row.pixel_auroc,
    }


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Recompute metrics from a detect run directory into a new evaluate run."""
    if args.run_dir is None:
        raise CliError("evaluate needs a detect run directory")
    results_dir = Path(args.run_dir)
    records = [
        EvaluationRecord(
            image_id=score["image_id"],
            category=score["category"],
            anomalous=bool(score["label"]),
            image_score=float(score["image_score"]),
            score_map=load_map(results_dir, score["image_id"]).astype("float64"),
            gt_mask=load_gt(results_dir, score["image_id"]),
        )
        for score in load_scores(results_dir)
    ]
    metrics = evaluate_run(records, pixel_mode=config.scoring.pixel_mode)
    store, cfg_hash = _start_run("evaluate", config)
    _write_metrics(store, metrics)
    store.write_manifest("evaluate", cfg_hash, config.seed, extra={"results_dir": str(results_dir)})
    return {
        "command": "evaluate",
        "run_dir": str(store.run_dir),
        "metrics": metrics.to_dict(),
    }


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Run the variant and sweep matrix of an ablation plan on the test set."""
    if args.plan is None:
        raise CliError("ablate needs --plan")
    plan = load_plan(args.plan)
    components, checkpoint = _components(config, args, plan.metric_modes)
    samples = load_dataset(config.dataset.spec(SPLIT_TEST))
    store, cfg_hash = _start_run("ablate", config)
    rows = run_ablation(
        plan,
        samples,
        config.dataset.category,
        components,
        config.seed,
        store=store,
        pixel_mode=config.scoring.pixel_mode,
        device=config.device,
    )
    store.write_manifest("ablate", cfg_hash, config.seed, checkpoint=checkpoint)
    return {"command": "ablate", "run_dir": str(store.run_dir), "points": len(rows)}


def cmd_oracle_check(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Gaussian-prior check of the sampler over the configured ρ values."""
    oracle = config.oracle
    prior = GaussianPrior(mu0=oracle.mu0, var0=oracle.var0)
    schedule = build_schedule(**config.schedule.to_dict())
    reports = []
    for rho in oracle.rho_values:
        cfg = SamplerConfig(T=oracle.T, N=oracle.N, rho=float(rho))
        report = oracle_check(
            prior, oracle.y, cfg, oracle.n_samples, config.seed, schedule, shape=tuple(oracle.shape)
        )
        reports.append(report.to_dict())
    store, cfg_hash = _start_run("oracle-check", config)
    store.write_json(ORACLE_FILE, {"reports": reports})
    store.write_manifest("oracle-check", cfg_hash, config.seed)
    return {
        "command": "oracle-check",
        "run_dir": str(store.run_dir),
        "empirical_means": {str(r["rho"]): r["empirical_mean"] for r in reports},
    }


def cmd_generate_synthetic(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Write the seeded synthetic benchmark in the MVTec directory layout."""
    synthetic = config.synthetic
    benchmark = generate_synthetic(
        config.seed,
        synthetic.n_train,
        synthetic.n_test_normal,
        synthetic.n_test_anomalous,
        size=synthetic.size,
    )
    category_dir = write_mvtec_layout(benchmark, Path(config.dataset.root), config.dataset.category)
    return {
        "command": "generate-synthetic",
        "dataset_dir": str(category_dir),
        "n_train": len(benchmark.train),
        "n_test": len(benchmark.test),
    }


HANDLERS = {
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "oracle-check": cmd_oracle_check,
    "generate-synthetic": cmd_generate_synthetic,
}


def main(argv: list[str] | None = None) -> int:
    """Run one command; prints one JSON line to stdout, or one to stderr on failure."""
    try:
        args = build_parser().parse_args(argv)
        if args.log_level:
            logging.getLogger().setLevel(getattr(logging, args.log_level.upper()))
        torch.use_deterministic_algorithms(True, warn_only=True)
        config = _resolve_config(args)
        _LOGGER.info("Running %s (seed %d)", args.command, config.seed)
        summary = HANDLERS[args.command](config, args)
    except Exception as ex:
        _LOGGER.debug("Command failed", exc_info=True)
        print(json.dumps({"error": str(ex), "type": type(ex).__name__}), file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        _LOGGER.info("Interrupted by user")
        sys.exit(130)
