"""Append-only CSV sink for scalar metrics and per-rollout reward breakdowns."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

METRICS_SCHEMA_VERSION = 1
METRIC_COLUMNS = ("timestamp", "run_id", "epoch", "split", "name", "value")
REWARD_COLUMNS = ("run_id", "epoch", "graph_id", "case", "r_perf", "r_sparse", "set_size", "total")
SPLITS = frozenset({"train", "val", "test"})

VOCABULARY = frozenset(
    {
        "accuracy",
        "node_ratio",
        "edge_ratio",
        "reward",
        "set_size",
        "coverage",
        "loss_ce",
        "quantile",
        "invalid_fraction",
        "ppo_surrogate",
        "ppo_value_loss",
        "ppo_entropy",
        "ppo_clip_fraction",
        "ppo_ratio_deviation",
        "lr_classifier",
        "lr_policy",
        "policy_frozen",
    }
)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricRow:
    timestamp: str
    run_id: str
    epoch: int
    split: str
    name: str
    value: float


class MetricsSink:
    """Single-writer CSV sink with a fixed header.

    ``clock="logical"`` stamps rows with their sequence number so that two
    identical runs write byte-identical files; ``clock="wall"`` uses UTC time.
    """

    def __init__(self, path, run_id: str, clock: str = "logical", rewards_path=None, vocabulary=VOCABULARY):
        if clock not in ("logical", "wall"):
            raise ValueError(f"unknown clock {clock!r}")
        self.path = Path(path)
        self.run_id = run_id
        self.clock = clock
        self.vocabulary = frozenset(vocabulary)
        self._seq = 0
        self._fh = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRIC_COLUMNS)
        self._rfh = None
        if rewards_path is not None:
            self._rfh = Path(rewards_path).open("w", newline="", encoding="utf-8")
            self._rwriter = csv.writer(self._rfh, lineterminator="\n")
            self._rwriter.writerow(REWARD_COLUMNS)

    @property
    def closed(self) -> bool:
        return self._fh is None

    def _stamp(self) -> str:
        self._seq += 1
        if self.clock == "logical":
            return str(self._seq)
        return datetime.now(timezone.utc).isoformat(timespec="microseconds")

    def log(self, epoch: int, split: str, name: str, value: float) -> MetricRow:
        row = MetricRow(self._stamp(), self.run_id, int(epoch), split, name, float(value))
        record(self, row)
        return row

    def record(self, row: MetricRow) -> None:
        if self.closed:
            raise MetricError("sink is closed")
        if row.name not in self.vocabulary:
            raise MetricError(f"unregistered metric name {row.name!r}")
        if row.split not in SPLITS:
            raise MetricError(f"unknown split {row.split!r}")
        if not math.isfinite(row.value):
            raise MetricError(f"non-finite value for {row.name}: {row.value}")
        self._writer.writerow([row.timestamp, row.run_id, row.epoch, row.split, row.name, repr(row.value)])

    def record_reward(self, epoch: int, graph_id: int, breakdown) -> None:
        if self._rfh is None:
            return
        b = breakdown
        self._rwriter.writerow(
            [self.run_id, epoch, graph_id, b.case, repr(b.r_perf), repr(b.r_sparse), b.set_size, repr(b.total)]
        )

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()
        if self._rfh is not None:
            self._rfh.flush()

    def close(self) -> None:
        if self._fh is None:
            return
        self.flush()
        self._fh.close()
        self._fh = None
        if self._rfh is not None:
            self._rfh.close()
            self._rfh = None

    def __enter__(self) -> MetricsSink:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def record(sink: MetricsSink, row: MetricRow) -> None:
    sink.record(row)


def read_metrics(path) -> list[MetricRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRIC_COLUMNS:
            raise MetricError(f"unexpected header {header}")
        return [MetricRow(t, r, int(e), s, n, float(v)) for t, r, e, s, n, v in reader]
