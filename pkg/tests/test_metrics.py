import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cores.metrics import METRIC_COLUMNS, MetricError, MetricRow, MetricsSink, read_metrics, record
from cores.reward import RewardBreakdown


def test_record_and_read_back(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsSink(path, "run") as sink:
        row = sink.log(3, "val", "accuracy", 0.125)
        record(sink, MetricRow("x", "run", 4, "test", "node_ratio", 1.0 / 3.0))
    rows = read_metrics(path)
    assert rows[0] == row
    assert rows[1].value == 1.0 / 3.0  # repr round-trips exactly


def test_header_and_line_count(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsSink(path, "run") as sink:
        for i in range(10_000):
            sink.log(i, "train", "loss_ce", i * 0.5)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 10_001
    assert [r.epoch for r in read_metrics(path)] == list(range(10_000))


@pytest.mark.parametrize("value", [math.nan, math.inf, -math.inf])
def test_non_finite_rejected(tmp_path, value):
    with MetricsSink(tmp_path / "m.csv", "run") as sink:
        with pytest.raises(MetricError):
            sink.log(0, "val", "accuracy", value)


def test_unknown_name_and_split_rejected(tmp_path):
    with MetricsSink(tmp_path / "m.csv", "run") as sink:
        with pytest.raises(MetricError):
            sink.log(0, "val", "made_up", 1.0)
        with pytest.raises(MetricError):
            sink.log(0, "holdout", "accuracy", 1.0)


def test_closed_sink_rejects_rows(tmp_path):
    sink = MetricsSink(tmp_path / "m.csv", "run")
    sink.close()
    sink.close()
    with pytest.raises(MetricError):
        sink.log(0, "val", "accuracy", 1.0)


def test_logical_clock_is_reproducible(tmp_path):
    for name in ("a.csv", "b.csv"):
        with MetricsSink(tmp_path / name, "run") as sink:
            sink.log(1, "val", "accuracy", 0.5)
            sink.log(1, "val", "reward", -0.25)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_wall_clock_stamps(tmp_path):
    with MetricsSink(tmp_path / "m.csv", "run", clock="wall") as sink:
        row = sink.log(1, "val", "accuracy", 0.5)
    assert "T" in row.timestamp


def test_reward_rows(tmp_path):
    with MetricsSink(tmp_path / "m.csv", "run", rewards_path=tmp_path / "r.csv") as sink:
        sink.record_reward(2, 17, RewardBreakdown(0.8, 0.5, 1, True, 0.5, "certain"))
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("run_id,epoch,graph_id,case")
    assert lines[1] == "run,2,17,certain,0.8,0.5,1,0.5"


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=30))
def test_rows_keep_write_order(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("m") / "m.csv"
    with MetricsSink(path, "run") as sink:
        for i, v in enumerate(values):
            sink.log(i, "train", "reward", v)
    assert [r.value for r in read_metrics(path)] == values
