from pathlib import Path

import pytest

from src.agents.engine import Simulation
from src.core.model import DataKind, DataRef, TaskGraph, TaskSpec
from src.core.platform import PlatformSpec
from src.core.policies import DataPolicy, DispatchPolicy, PolicyConfig, ProvisionPolicy, ResiliencePolicy

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def chain_graph(runtimes=(10.0, 10.0, 10.0)) -> TaskGraph:
    """a -> b -> c over intermediates m0, m1, with a final output."""
    graph = TaskGraph()
    graph.add_data(DataRef(id="in", size=0, kind=DataKind.UNIQUE_INPUT))
    feed = "in"
    for i, runtime in enumerate(runtimes):
        last = i == len(runtimes) - 1
        out = graph.add_data(DataRef(id="out" if last else f"m{i}", size=0, kind=DataKind.OUTPUT if last else DataKind.INTERMEDIATE))
        graph.add_task(TaskSpec(id=f"t{i}", inputs=(feed,), outputs=(out,), runtime=runtime))
        feed = out
    return graph


def bag_graph(runtimes) -> TaskGraph:
    """Independent tasks with no data."""
    graph = TaskGraph()
    for i, runtime in enumerate(runtimes):
        graph.add_task(TaskSpec(id=f"t{i}", runtime=runtime))
    return graph


def platform(nodes: int = 4, **overrides) -> PlatformSpec:
    return PlatformSpec(**{"node_count": nodes, "utility_node_count": 0, **overrides})


def policy(
    provision: dict | None = None,
    dispatch: dict | None = None,
    data: dict | None = None,
    resilience: dict | None = None,
    nodes: int = 4,
) -> PolicyConfig:
    """Static allocation of ``nodes`` with instantaneous dispatch unless overridden."""
    return PolicyConfig(
        provision=ProvisionPolicy(**{"mode": "static", "static_nodes": nodes, **(provision or {})}),
        dispatch=DispatchPolicy(**{"dispatch_throughput_per_sec": None, **(dispatch or {})}),
        data=DataPolicy(**(data or {})),
        resilience=ResiliencePolicy(**(resilience or {})),
    )


def simulate(graph: TaskGraph, nodes: int = 4, seed: int = 0, platform_kw: dict | None = None, **policy_kw):
    sim = Simulation(graph, platform(nodes, **(platform_kw or {})), policy(nodes=nodes, **policy_kw), seed=seed)
    return sim, sim.run()


def kinds(result, kind) -> list:
    return [ev for ev in result.trace if ev.kind == kind]


@pytest.fixture
def oracle_graph():
    return bag_graph([100.0, 100.0, 100.0, 400.0])


@pytest.fixture
def tmp_config(tmp_path):
    """Write a YAML config next to a copy of the oracle workload; returns the path."""

    def write(text: str, name: str = "exp.yaml") -> Path:
        (tmp_path / "oracle.wl").write_text((CONFIGS / "workloads" / "oracle.wl").read_text())
        path = tmp_path / name
        path.write_text(text)
        return path

    return write
