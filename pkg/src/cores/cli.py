"""Command-line front end.

Exit codes: 0 success, 2 bad config or usage, 3 dataset missing,
4 checkpoint missing or mismatched, 5 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import runner
from .graph import IngestionError, apply_action, dataset_stats, generate_ba_shapes, write_tu_dataset
from .policy import act_batch
from .trainer import DivergenceError, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_DIVERGED = 0, 2, 3, 4, 5
SWEEP_COLUMNS = ("d", "lambda", "fold", "accuracy", "node_ratio", "edge_ratio")

log = logging.getLogger("cores")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _apply_overrides(cfg: C.ExperimentConfig, args) -> C.ExperimentConfig:
    train, data = cfg.train, cfg.data
    if getattr(args, "mode", None):
        train = replace(train, mode=args.mode)
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "report_last_epoch", False):
        train = replace(train, report_last_epoch=True)
    if getattr(args, "epochs", None) is not None:
        train = replace(train, max_epochs=args.epochs)
    if getattr(args, "dataset", None):
        data = replace(data, dataset=args.dataset)
    if getattr(args, "folds", None) is not None:
        data = replace(data, folds=args.folds)
    return replace(cfg, train=train, data=data)


def _load_config_and_data(args):
    cfg = _apply_overrides(C.load(args.config), args)
    dataset = runner.load_dataset(cfg.data, runner.resolve_data_dir(args.data_dir, cfg.data))
    runner.check_compatible(cfg, dataset)
    return cfg, dataset


def cmd_train(args) -> int:
    cfg, dataset = _load_config_and_data(args)
    out = Path(args.out)
    results = runner.run_experiment(cfg, dataset, out, log_rewards=args.log_rewards)
    print(json.dumps(runner.aggregate(results), indent=2, sort_keys=True))
    return EXIT_OK


def _parse_grid(text: str | None, name: str, lo: float, hi: float) -> list[float] | None:
    if text is None:
        return None
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise C.ConfigError(f"--{name}: expected comma-separated numbers, got {text!r}", name) from None
    if not values:
        raise C.ConfigError(f"--{name}: empty grid", name)
    bad = [v for v in values if not lo <= v <= hi]
    if bad:
        raise C.ConfigError(f"--{name}: values {bad} outside [{lo}, {hi}]", name)
    return values


def cmd_sweep(args) -> int:
    d_grid = _parse_grid(args.d, "d", 0.01, 0.99)
    l_grid = _parse_grid(args.lam, "lambda", 0.0, 1.0)
    if d_grid is None and l_grid is None:
        raise C.ConfigError("sweep needs --d and/or --lambda", "grid")
    cfg, dataset = _load_config_and_data(args)
    d_grid = d_grid or [cfg.train.reward.desired_ratio]
    l_grid = l_grid or [cfg.train.reward.lam]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for d, lam in itertools.product(d_grid, l_grid):
        reward = replace(cfg.train.reward, desired_ratio=d, lam=lam)
        point = replace(cfg, train=replace(cfg.train, reward=reward))
        for split in runner.make_folds(point, dataset):
            res = runner.run_fold(point, dataset, split, out / f"d{d}_lambda{lam}" / f"fold{split.fold_index}")
            test = res.selected["test"]
            rows.append((d, lam, split.fold_index, test.accuracy, test.mean_node_ratio, test.mean_edge_ratio))
            print(f"d={d} lambda={lam} fold={split.fold_index} acc={test.accuracy:.4f} "
                  f"node={test.mean_node_ratio:.4f} edge={test.mean_edge_ratio:.4f}")
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows([d, lam, fold, repr(a), repr(n), repr(e)] for d, lam, fold, a, n, e in rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run) if args.run else None
    clf_path = Path(args.classifier) if args.classifier else (run / "classifier.ckpt" if run else None)
    pol_path = Path(args.policy) if args.policy else None
    if pol_path is None and run is not None and (run / "policy.ckpt").exists():
        pol_path = run / "policy.ckpt"
    if clf_path is None:
        return _fail(EXIT_CONFIG, "eval needs --run or --classifier")
    for p in (clf_path, pol_path):
        if p is not None and not p.is_file():
            return _fail(EXIT_CHECKPOINT, f"checkpoint not found: {p}")
    cfg, fold, classifier, policy = runner.load_models(clf_path, pol_path)
    cfg = _apply_overrides(cfg, args)
    dataset = runner.load_dataset(cfg.data, runner.resolve_data_dir(args.data_dir, cfg.data))
    if dataset[0].num_features != classifier.in_dim:
        raise runner.CheckpointMismatch(
            f"dataset has {dataset[0].num_features} features, checkpoint expects {classifier.in_dim}"
        )
    if policy is not None and policy.mode != cfg.train.mode:
        raise runner.CheckpointMismatch(f"policy was trained in {policy.mode} mode, not {cfg.train.mode}")
    folds = runner.make_folds(cfg, dataset)
    split = folds[min(fold, len(folds) - 1)]
    ids = list(split.test) or list(split.val)
    metrics = evaluate(classifier, policy, dataset, ids, cfg.train.mode, deterministic=True, split="test")
    record = runner.metrics_dict(metrics)
    print(json.dumps(record, indent=2, sort_keys=True))
    out = Path(args.out) if args.out else (run or Path("."))
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    if args.dump_subgraphs:
        _dump_subgraphs(out / "subgraphs.jsonl", policy, dataset, ids, cfg.train.mode)
    return EXIT_OK


def _dump_subgraphs(path: Path, policy, dataset, ids, mode: str) -> None:
    graphs = [dataset[i] for i in ids]
    if policy is None:
        masks = [np.zeros(g.num_nodes if mode == "node" else g.num_edges, bool) for g in graphs]
    else:
        masks = [s.mask for s in act_batch(policy, graphs, None, deterministic=True)]
    with path.open("w", encoding="utf-8") as fh:
        for gid, g, mask in zip(ids, graphs, masks):
            sub = apply_action(g, mode, mask)
            row = {
                "graph_id": int(gid),
                "label": g.label,
                "kept_nodes": [int(x) for x in sub.kept_nodes],
                "kept_edges": [int(x) for x in sub.kept_edges],
            }
            if g.motif_mask is not None:
                row["motif_nodes"] = [int(x) for x in g.motif_mask]
            fh.write(json.dumps(row) + "\n")


def cmd_dataset_info(args) -> int:
    data = C.DataConfig(dataset=args.dataset)
    if args.config:
        data = replace(C.load(args.config).data, dataset=args.dataset or C.load(args.config).data.dataset)
    graphs = runner.load_dataset(data, runner.resolve_data_dir(args.data_dir, data))
    print(json.dumps({"dataset": data.dataset, **dataset_stats(graphs)}, indent=2))
    return EXIT_OK


def cmd_generate(args) -> int:
    graphs = generate_ba_shapes(args.num_graphs, args.base_nodes, args.seed)
    write_tu_dataset(graphs, Path(args.out), args.name)
    print(json.dumps({"dataset": args.name, "out": str(args.out), **dataset_stats(graphs)}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cores", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--dataset", help="dataset name (overrides [data].dataset)")
        p.add_argument("--data-dir", help="dataset root (falls back to $CORES_DATA_DIR, then ./data)")

    def run_flags(p):
        p.add_argument("--mode", choices=("node", "edge"))
        p.add_argument("--folds", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int, help="override [train].max_epochs")
        p.add_argument("--report-last-epoch", action="store_true")

    p = sub.add_parser("train", help="train on every requested fold")
    common(p)
    run_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log-rewards", action="store_true", help="also write per-rollout rewards.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over d and lambda")
    common(p)
    run_flags(p)
    p.add_argument("--d", help="comma-separated desired ratios")
    p.add_argument("--lambda", dest="lam", help="comma-separated lambda values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    common(p, needs_config=False)
    p.add_argument("--run", help="fold directory written by train")
    p.add_argument("--classifier")
    p.add_argument("--policy")
    p.add_argument("--mode", choices=("node", "edge"))
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--dump-subgraphs", action="store_true", help="write kept masks as JSON lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dataset-info", help="print dataset statistics")
    common(p, needs_config=False)
    p.add_argument("--config")
    p.set_defaults(func=cmd_dataset_info)

    p = sub.add_parser("generate-synthetic", help="write a BA-Shapes dataset in TU layout")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="BA_SHAPES")
    p.add_argument("--num-graphs", type=int, default=200)
    p.add_argument("--base-nodes", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "dataset-info" and not (args.dataset or args.config):
        return _fail(EXIT_CONFIG, "dataset-info needs --dataset or --config")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        return _fail(EXIT_CONFIG, f"{exc}" + (f" (key: {exc.key})" if exc.key else ""))
    except IngestionError as exc:
        return _fail(EXIT_DATA, str(exc))
    except runner.CheckpointMismatch as exc:
        return _fail(EXIT_CHECKPOINT, str(exc))
    except DivergenceError as exc:
        out = getattr(args, "out", None)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "divergence.json").write_text(json.dumps(exc.dump, indent=2))
        return _fail(EXIT_DIVERGED, str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())
