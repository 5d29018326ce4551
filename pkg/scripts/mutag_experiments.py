"""MUTAG runs: vanilla vs node-removal CORES on fold 0, and a fold-averaged lambda sweep.

    python scripts/mutag_experiments.py band
    python scripts/mutag_experiments.py lambda --d 0.1 --lambdas 0,0.5,1
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from cores import config as C
from cores import runner

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _fold0(cfg: C.ExperimentConfig, data_dir=None):
    dataset = runner.load_dataset(cfg.data, runner.resolve_data_dir(data_dir, cfg.data))
    return dataset, runner.make_folds(cfg, dataset)[0]


def band(data_dir=None, epochs=None) -> dict:
    """Best-validation test metrics of vanilla GIN and CORES_N on fold 0."""
    out = {}
    for name in ("vanilla", "cores_node"):
        cfg = C.load(CONFIGS / f"mutag_gin_{name}.toml")
        if epochs is not None:
            cfg = replace(cfg, train=replace(cfg.train, max_epochs=epochs))
        dataset, split = _fold0(cfg, data_dir)
        test = runner.run_fold(cfg, dataset, split, None).selected["test"]
        out[name] = {"accuracy": test.accuracy, "node_ratio": test.mean_node_ratio, "edge_ratio": test.mean_edge_ratio}
    return out


def lambda_sweep(lambdas=(0.0, 0.5, 1.0), d=0.1, data_dir=None, epochs=None, folds=None) -> list[dict]:
    """Fold-averaged last-epoch test metrics and maximum validation accuracy for each lambda."""
    base = C.load(CONFIGS / "mutag_gin_cores_node.toml")
    train = replace(base.train, report_last_epoch=True)
    if epochs is not None:
        train = replace(train, max_epochs=epochs)
    data = base.data if folds is None else replace(base.data, folds=folds)
    dataset = runner.load_dataset(data, runner.resolve_data_dir(data_dir, data))
    rows = []
    for lam in lambdas:
        cfg = replace(base, data=data, train=replace(train, reward=replace(train.reward, lam=lam, desired_ratio=d)))
        per_fold = []
        for split in runner.make_folds(cfg, dataset):
            result = runner.run_fold(cfg, dataset, split, None)
            test = result.selected["test"]
            val_max = max(m.accuracy for m in result.history if m.split == "val")
            per_fold.append((test.accuracy, test.mean_node_ratio, test.mean_edge_ratio, val_max))
        acc, node, edge, val_max = np.mean(per_fold, axis=0)
        rows.append({
            "lambda": lam,
            "d": d,
            "folds": len(per_fold),
            "accuracy": float(acc),
            "node_ratio": float(node),
            "edge_ratio": float(edge),
            "val_accuracy_max": float(val_max),
        })
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("which", choices=("band", "lambda"))
    parser.add_argument("--data-dir")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--d", type=float, default=0.1)
    parser.add_argument("--lambdas", default="0,0.5,1")
    parser.add_argument("--folds", type=int, help="override [data].folds for the sweep")
    args = parser.parse_args()
    if args.which == "band":
        result = band(args.data_dir, args.epochs)
    else:
        lambdas = [float(x) for x in args.lambdas.split(",")]
        result = lambda_sweep(lambdas, args.d, args.data_dir, args.epochs, args.folds)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
