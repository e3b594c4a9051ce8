import pandas as pd
import pytest
from conftest import simulate

from src.core.errors import MalformedTraceError
from src.core.kernel import EventKind as K
from src.core.kernel import SimEvent
from src.core.metrics import COLUMNS, build_report, bytes_moved, tail_profile, utilization, write_csv
from src.core.model import TaskGraph


def trace(*records) -> list[SimEvent]:
    return [SimEvent(t, i, kind, payload) for i, (t, kind, payload) in enumerate(records)]


def two_workers() -> list[SimEvent]:
    return trace(
        (0.0, K.BLOCK_GRANTED, {"block": 0, "nodes": [0]}),
        (0.0, K.BLOCK_GRANTED, {"block": 1, "nodes": [1]}),
        (0.0, K.TASK_START, {"task": "a", "attempt": 1, "node": 0}),
        (10.0, K.TASK_START, {"task": "b", "attempt": 1, "node": 1}),
        (10.0, K.TRANSFER_END, {"data": "x", "bytes": 500, "route": "gfs-read"}),
        (100.0, K.TASK_END, {"task": "a", "attempt": 1, "node": 0}),
        (100.0, K.TASK_END, {"task": "b", "attempt": 1, "node": 1}),
        (100.0, K.BLOCK_RELEASED, {"block": 0}),
        (100.0, K.BLOCK_RELEASED, {"block": 1}),
    )


def test_utilization_of_two_workers():
    assert utilization(two_workers()) == pytest.approx(0.95)
    assert utilization(two_workers(), window=(0.0, 10.0)) == pytest.approx(0.5)


def test_report_fields():
    report = build_report(two_workers(), cores_per_node=16)
    assert report.makespan == 100.0
    assert report.allocated_core_seconds == 3200.0
    assert report.busy_core_seconds == 3040.0
    assert report.bytes_per_route["gfs-read"] == 500
    assert report.executed == 2 and report.task_starts == 2


def test_busy_from_counts_bound_stage_in():
    events = trace(
        (0.0, K.BLOCK_GRANTED, {"block": 0, "nodes": [0]}),
        (5.0, K.TASK_START, {"task": "a", "attempt": 1, "busy_from": 0.0}),
        (10.0, K.TASK_END, {"task": "a", "attempt": 1}),
        (10.0, K.BLOCK_RELEASED, {"block": 0}),
    )
    assert utilization(events) == 1.0


def test_gang_width_counts_every_node():
    events = trace(
        (0.0, K.BLOCK_GRANTED, {"block": 0, "nodes": [0, 1]}),
        (0.0, K.TASK_START, {"task": "mpi", "attempt": 1, "nodes": [0, 1]}),
        (10.0, K.TASK_END, {"task": "mpi", "attempt": 1, "nodes": [0, 1]}),
        (20.0, K.BLOCK_RELEASED, {"block": 0}),
    )
    assert utilization(events) == pytest.approx(0.5)


def test_tail_profile_of_long_tail(oracle_graph):
    _, result = simulate(oracle_graph)
    assert result.report.utilization == pytest.approx(0.4375)
    assert tail_profile(result.trace)[-1] == pytest.approx(0.25)
    assert result.report.tail[0] == pytest.approx(1.0)


def test_empty_run_is_fully_utilized():
    _, result = simulate(TaskGraph())
    assert result.report.makespan == 0.0
    assert result.report.utilization == 1.0


@pytest.mark.parametrize(
    "records",
    [
        [(5.0, K.TASK_START, {"task": "a", "attempt": 1}), (1.0, K.TASK_END, {"task": "a", "attempt": 1})],
        [(0.0, K.BLOCK_RELEASED, {"block": 3})],
        [(0.0, K.BLOCK_GRANTED, {"block": 0, "nodes": [0]})],
        [(0.0, K.TASK_END, {"task": "a", "attempt": 1})],
        [(0.0, K.TASK_START, {"task": "a", "attempt": 1})],
    ],
)
def test_malformed_traces(records):
    with pytest.raises(MalformedTraceError):
        build_report(trace(*records))


def test_bytes_moved_covers_every_route():
    totals = bytes_moved(two_workers())
    assert set(totals) == {"gfs-read", "gfs-write", "node-to-node", "ifs-read", "ifs-write"}


def test_csv_has_fixed_columns(tmp_path):
    report = build_report(two_workers(), seed=3, label="pair")
    path = write_csv([report], tmp_path / "out" / "pair.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == COLUMNS
    assert frame.loc[0, "utilization"] == pytest.approx(0.95)
    assert frame.loc[0, "label"] == "pair"
