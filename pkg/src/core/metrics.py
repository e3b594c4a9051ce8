"""Report quantities derived from a simulation trace.

Allocation intervals come from block-granted/block-released pairs. Busy intervals open at
task-start (or at its ``busy_from`` field when stage-in binds the worker) and close at the
matching task-end, task-fail, prune-signal or migrate of the same (task, attempt).
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from src.core.errors import MalformedTraceError
from src.core.kernel import EventKind, SimEvent
from src.core.platform import Route

logger = logging.getLogger(__name__)

Interval = tuple[float, float, int]

CLOSERS = {EventKind.TASK_END, EventKind.TASK_FAIL, EventKind.PRUNE_SIGNAL, EventKind.MIGRATE}


def _width(payload: dict) -> int:
    nodes = payload.get("nodes")
    return len(nodes) if isinstance(nodes, (list, tuple)) else 1


def _check_order(trace: list[SimEvent]) -> None:
    for prev, cur in zip(trace, trace[1:]):
        if cur.time < prev.time:
            raise MalformedTraceError(f"trace goes back in time at seq {cur.seq}: {prev.time} -> {cur.time}")


def allocation_intervals(trace: list[SimEvent]) -> list[Interval]:
    _check_order(trace)
    open_blocks: dict[int, tuple[float, int]] = {}
    out = []
    for ev in trace:
        if ev.kind == EventKind.BLOCK_GRANTED:
            block = ev.payload["block"]
            if block in open_blocks:
                raise MalformedTraceError(f"block {block} granted twice without release")
            open_blocks[block] = (ev.time, len(ev.payload["nodes"]))
        elif ev.kind == EventKind.BLOCK_RELEASED:
            block = ev.payload["block"]
            if block not in open_blocks:
                raise MalformedTraceError(f"block {block} released without grant (seq {ev.seq})")
            start, width = open_blocks.pop(block)
            out.append((start, ev.time, width))
    if open_blocks:
        raise MalformedTraceError(f"blocks never released: {sorted(open_blocks)}")
    return out


def busy_intervals(trace: list[SimEvent]) -> list[Interval]:
    _check_order(trace)
    running: dict[tuple[str, int], tuple[float, int]] = {}
    out = []
    for ev in trace:
        if ev.kind == EventKind.TASK_START:
            key = (ev.payload["task"], ev.payload["attempt"])
            if key in running:
                raise MalformedTraceError(f"task {key[0]} attempt {key[1]} started twice (seq {ev.seq})")
            running[key] = (ev.payload.get("busy_from", ev.time), _width(ev.payload))
        elif ev.kind in CLOSERS:
            key = (ev.payload["task"], ev.payload["attempt"])
            if key in running:
                start, width = running.pop(key)
                out.append((start, ev.time, width))
            elif ev.kind == EventKind.TASK_END:
                raise MalformedTraceError(f"task-end for {key[0]} without a start (seq {ev.seq})")
    if running:
        raise MalformedTraceError(f"tasks still running at trace end: {sorted(running)}")
    return out


def _clipped(intervals: list[Interval], window: tuple[float, float] | None) -> float:
    total = 0.0
    for start, end, width in intervals:
        if window is not None:
            start, end = max(start, window[0]), min(end, window[1])
        if end > start:
            total += (end - start) * width
    return total


def utilization(trace: list[SimEvent], window: tuple[float, float] | None = None) -> float:
    """Busy node-time over allocated node-time; an empty allocation counts as fully utilized."""
    allocated = _clipped(allocation_intervals(trace), window)
    busy = _clipped(busy_intervals(trace), window)
    if allocated <= 0:
        return 1.0
    return min(1.0, busy / allocated)


def bytes_moved(trace: list[SimEvent]) -> dict[str, int]:
    totals = {r.value: 0 for r in Route}
    for ev in trace:
        if ev.kind == EventKind.TRANSFER_END:
            totals[ev.payload["route"]] += int(ev.payload["bytes"])
    return totals


def span(trace: list[SimEvent], start: float | None = None) -> tuple[float, float]:
    if not trace:
        return (start or 0.0, start or 0.0)
    return (trace[0].time if start is None else start, trace[-1].time)


def tail_profile(trace: list[SimEvent], start: float | None = None, bins: int = 10) -> list[float]:
    """Utilization in each tenth of the makespan."""
    t0, t1 = span(trace, start)
    if t1 <= t0:
        return [1.0] * bins
    alloc, busy = allocation_intervals(trace), busy_intervals(trace)
    edges = np.linspace(t0, t1, bins + 1)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        a = _clipped(alloc, (lo, hi))
        out.append(1.0 if a <= 0 else min(1.0, _clipped(busy, (lo, hi)) / a))
    return out


def dispatch_latencies(trace: list[SimEvent]) -> np.ndarray:
    return np.array(
        [ev.time - ev.payload["ready_at"] for ev in trace if ev.kind == EventKind.DISPATCH and "ready_at" in ev.payload],
        dtype=float,
    )


# -------- Report --------
@dataclass
class RunReport:
    seed: int
    makespan: float
    utilization: float
    allocated_core_seconds: float
    busy_core_seconds: float
    bytes_per_route: dict[str, int]
    dispatch_p50: float
    dispatch_p90: float
    dispatch_p99: float
    generated: int
    executed: int
    pruned: int
    failed: int
    retries: int
    task_starts: int
    tail: list[float] = field(default_factory=list)
    halted: bool = False
    label: str = ""

    def to_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k not in ("bytes_per_route", "tail")}
        for route, total in self.bytes_per_route.items():
            row[f"bytes_{route.replace('-', '_')}"] = total
        for i, value in enumerate(self.tail, start=1):
            row[f"tail_d{i}"] = value
        return row


COLUMNS = [
    "label",
    "seed",
    "makespan",
    "utilization",
    "allocated_core_seconds",
    "busy_core_seconds",
    "bytes_gfs_read",
    "bytes_gfs_write",
    "bytes_node_to_node",
    "bytes_ifs_read",
    "bytes_ifs_write",
    "dispatch_p50",
    "dispatch_p90",
    "dispatch_p99",
    "generated",
    "executed",
    "pruned",
    "failed",
    "retries",
    "task_starts",
    "halted",
] + [f"tail_d{i}" for i in range(1, 11)]


def build_report(
    trace: list[SimEvent],
    counts: dict[str, int] | None = None,
    seed: int = 0,
    start: float | None = None,
    cores_per_node: int = 1,
    halted: bool = False,
    label: str = "",
) -> RunReport:
    """Summarize a trace; ``counts`` are the final task-state counts of the graph."""
    alloc = _clipped(allocation_intervals(trace), None)
    busy = _clipped(busy_intervals(trace), None)
    t0, t1 = span(trace, start)
    lat = dispatch_latencies(trace)
    p50, p90, p99 = (float(v) for v in np.percentile(lat, [50, 90, 99])) if lat.size else (0.0, 0.0, 0.0)

    fails = [ev for ev in trace if ev.kind == EventKind.TASK_FAIL]
    if counts is None:
        done = {ev.payload["task"] for ev in trace if ev.kind == EventKind.TASK_END}
        counts = {"done": len(done), "pruned": 0, "failed": sum(1 for ev in fails if ev.payload.get("outcome") == "final")}
        counts["generated"] = sum(counts.values())
    generated = counts.get("generated", sum(v for k, v in counts.items() if k != "generated"))

    return RunReport(
        seed=seed,
        makespan=t1 - t0,
        utilization=1.0 if alloc <= 0 else min(1.0, busy / alloc),
        allocated_core_seconds=alloc * cores_per_node,
        busy_core_seconds=busy * cores_per_node,
        bytes_per_route=bytes_moved(trace),
        dispatch_p50=p50,
        dispatch_p90=p90,
        dispatch_p99=p99,
        generated=generated,
        executed=counts.get("done", 0),
        pruned=counts.get("pruned", 0),
        failed=counts.get("failed", 0),
        retries=sum(1 for ev in fails if ev.payload.get("outcome") in ("retry", "requeue")),
        task_starts=sum(1 for ev in trace if ev.kind == EventKind.TASK_START),
        tail=tail_profile(trace, start),
        halted=halted,
        label=label,
    )


def reports_frame(reports: list[RunReport]) -> pd.DataFrame:
    frame = pd.DataFrame([r.to_row() for r in reports])
    if frame.empty:
        return pd.DataFrame(columns=COLUMNS)
    return frame[COLUMNS]


def write_csv(reports: list[RunReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reports_frame(reports).to_csv(path, index=False, float_format="%.6f")
    logger.info("wrote %d report rows to %s", len(reports), path)
    return path
