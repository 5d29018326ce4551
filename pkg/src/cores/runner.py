"""Experiment orchestration shared by the CLI and the scripts: datasets, folds, outputs, checkpoints."""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from .gnn import GraphClassifier
from .graph import DatasetSplit, Graph, IngestionError, generate_ba_shapes, parse_tu_dataset, split_folds
from .metrics import METRICS_SCHEMA_VERSION, MetricsSink
from .policy import SparsificationPolicy
from .tensor import load_checkpoint, save_checkpoint
from .trainer import EpochMetrics, TrainResult, train, train_vanilla

SYNTHETIC_NAMES = {"ba-shapes", "ba_shapes", "bashapes"}
CHECKPOINT_FORMAT = "cores-model-1"


class CheckpointMismatch(ValueError):
    pass


def is_synthetic(name: str) -> bool:
    return name.lower() in SYNTHETIC_NAMES


def resolve_data_dir(cli_value: str | None, data: C.DataConfig) -> Path:
    for candidate in (cli_value, data.data_dir, os.environ.get("CORES_DATA_DIR")):
        if candidate:
            return Path(candidate)
    return Path("data")


def load_dataset(data: C.DataConfig, data_dir: Path) -> list[Graph]:
    """BA-Shapes is generated from the [data] settings; anything else is read in TU layout."""
    if is_synthetic(data.dataset):
        return generate_ba_shapes(data.num_graphs, data.base_nodes, data.synthetic_seed)
    name = data.dataset
    for directory in (data_dir / name, data_dir):
        if (directory / f"{name}_A.txt").exists():
            return parse_tu_dataset(directory, name)
    raise IngestionError(f"dataset {name!r} not found under {data_dir}")


def check_compatible(cfg: C.ExperimentConfig, dataset: Sequence[Graph]) -> None:
    if not dataset:
        raise IngestionError(f"dataset {cfg.data.dataset!r} is empty")
    k = max(g.label for g in dataset) + 1
    if k > cfg.train.gnn.num_classes:
        raise C.ConfigError(f"dataset has {k} classes but gnn.num_classes = {cfg.train.gnn.num_classes}", "gnn.num_classes")


def make_folds(cfg: C.ExperimentConfig, dataset: Sequence[Graph]) -> list[DatasetSplit]:
    return split_folds(dataset, cfg.train.splits, cfg.data.folds, cfg.data.split_seed)


def run_id(cfg: C.ExperimentConfig, fold: int) -> str:
    t = cfg.train
    return f"{cfg.data.dataset}-{cfg.method}-{t.mode}-s{t.seed}-f{fold}"


def metrics_dict(m: EpochMetrics) -> dict:
    d = asdict(m)
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


# --- checkpoints ------------------------------------------------------------


def _header(cfg: C.ExperimentConfig, kind: str, in_dim: int, fold: int) -> dict[str, str]:
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "mode": cfg.train.mode,
        "in_dim": str(in_dim),
        "fold": str(fold),
        "config": json.dumps(C.to_dict(cfg), sort_keys=True),
    }


def save_models(out: Path, cfg: C.ExperimentConfig, result: TrainResult, in_dim: int, fold: int) -> None:
    save_checkpoint(out / "classifier.ckpt", result.classifier.state_dict(), _header(cfg, "classifier", in_dim, fold))
    if result.policy is not None:
        save_checkpoint(out / "policy.ckpt", result.policy.state_dict(), _header(cfg, "policy", in_dim, fold))


def load_models(
    classifier_path, policy_path=None
) -> tuple[C.ExperimentConfig, int, GraphClassifier, SparsificationPolicy | None]:
    """Rebuild models from checkpoints; raises CheckpointMismatch on any inconsistency."""
    try:
        header, state = load_checkpoint(classifier_path)
    except (OSError, ValueError) as exc:
        raise CheckpointMismatch(f"cannot read classifier checkpoint: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT or header.get("kind") != "classifier":
        raise CheckpointMismatch(f"{classifier_path} is not a classifier checkpoint")
    try:
        cfg = C.from_dict(json.loads(header["config"]))
        in_dim, fold = int(header["in_dim"]), int(header["fold"])
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"corrupt checkpoint header: {exc}") from exc
    classifier = GraphClassifier(cfg.train.gnn, in_dim)
    try:
        classifier.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(str(exc)) from exc
    policy = None
    if policy_path is not None:
        try:
            pheader, pstate = load_checkpoint(policy_path)
        except (OSError, ValueError) as exc:
            raise CheckpointMismatch(f"cannot read policy checkpoint: {exc}") from exc
        if pheader.get("kind") != "policy":
            raise CheckpointMismatch(f"{policy_path} is not a policy checkpoint")
        if pheader.get("in_dim") != header["in_dim"] or pheader.get("config") != header["config"]:
            raise CheckpointMismatch("policy and classifier checkpoints come from different runs")
        policy = SparsificationPolicy(cfg.train.gnn, in_dim, pheader["mode"])
        try:
            policy.load_state_dict(pstate)
        except (KeyError, ValueError) as exc:
            raise CheckpointMismatch(str(exc)) from exc
    return cfg, fold, classifier, policy


# --- experiments ------------------------------------------------------------


def run_fold(
    cfg: C.ExperimentConfig, dataset: Sequence[Graph], split: DatasetSplit, out: Path | None, log_rewards: bool = False
) -> TrainResult:
    fold = split.fold_index
    sink = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(C.serialize(cfg), encoding="utf-8")
        sink = MetricsSink(out / "metrics.csv", run_id(cfg, fold), rewards_path=out / "rewards.csv" if log_rewards else None)
    try:
        fn = train if cfg.method == "cores" else train_vanilla
        result = fn(cfg.train, split, dataset, sink)
    finally:
        if sink is not None:
            sink.close()
    if out is not None:
        save_models(out, cfg, result, dataset[split.train[0]].num_features, fold)
        summary = {
            "run_id": run_id(cfg, fold),
            "fold": fold,
            "seed": cfg.train.seed,
            "method": cfg.method,
            "mode": cfg.train.mode,
            "metrics_schema": METRICS_SCHEMA_VERSION,
            "best_epoch": result.best_epoch,
            "report_last_epoch": cfg.train.report_last_epoch,
            "epochs_run": max((m.epoch for m in result.history), default=0),
            "reported": {k: metrics_dict(v) for k, v in result.selected.items()},
            "wall_clock_s": result.wall_clock_s,
            "config": C.to_dict(cfg),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return result


def aggregate(results: Sequence[TrainResult]) -> dict:
    """Mean and std of the reported test metrics across folds."""
    tests = [r.selected.get("test") for r in results if r.selected.get("test") is not None]
    out = {"folds": len(results)}
    for key, attr in (("accuracy", "accuracy"), ("node_ratio", "mean_node_ratio"), ("edge_ratio", "mean_edge_ratio")):
        vals = np.array([getattr(m, attr) for m in tests])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())} if len(vals) else None
    return out


def run_experiment(
    cfg: C.ExperimentConfig, dataset: Sequence[Graph], out: Path | None, log_rewards: bool = False
) -> list[TrainResult]:
    results = []
    for split in make_folds(cfg, dataset):
        fold_out = out / f"fold{split.fold_index}" if out is not None else None
        results.append(run_fold(cfg, dataset, split, fold_out, log_rewards))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(aggregate(results), indent=2, sort_keys=True), encoding="utf-8")
    return results
