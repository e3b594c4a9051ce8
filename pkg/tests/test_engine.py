import pytest
from conftest import bag_graph, kinds, platform, policy, simulate

from src.agents.engine import Simulation
from src.core.errors import DestinationBusyError, MigrationError, UnknownTaskError
from src.core.kernel import EventKind
from src.core.model import DataKind, DataRef, TaskGraph, TaskSpec, TaskState
from src.core.workloads import gen_branch_and_bound, gen_iterative, gen_pipeline, gen_sweep, generate

DYNAMIC = {"mode": "dynamic", "growth": "constant", "step": 4, "idle_release_after_sec": 0.0}
CHOP = {"chop": {"trigger_fraction": 0.9, "restart_nodes": 1}}


def starts(result) -> list[str]:
    return [ev.payload["task"] for ev in kinds(result, EventKind.TASK_START)]


# -------- long-tail oracle --------
def test_static_oracle(oracle_graph):
    _, result = simulate(oracle_graph)
    assert result.report.makespan == 400.0
    assert result.report.utilization == pytest.approx(0.4375)
    assert result.report.allocated_core_seconds == pytest.approx(1600.0)


def test_dynamic_release_oracle(oracle_graph):
    _, result = simulate(oracle_graph, provision=DYNAMIC)
    assert result.report.utilization == pytest.approx(1.0)
    assert result.report.allocated_core_seconds == pytest.approx(700.0)
    assert len(kinds(result, EventKind.BLOCK_RELEASED)) == 4


def test_chop_restarts_straggler_on_small_allocation(oracle_graph):
    _, result = simulate(oracle_graph, dispatch=CHOP)
    chop = kinds(result, EventKind.CHOP_TRIGGERED)
    assert [ev.time for ev in chop] == [100.0]
    assert result.report.allocated_core_seconds == pytest.approx(800.0)
    assert result.report.makespan == pytest.approx(500.0)
    assert starts(result).count("t3") == 2


def test_chop_with_migration_keeps_progress(oracle_graph):
    _, result = simulate(oracle_graph, dispatch={**CHOP, "migration": True})
    assert result.report.allocated_core_seconds == pytest.approx(700.0)
    assert result.report.makespan == pytest.approx(400.0)
    migrate = kinds(result, EventKind.MIGRATE)[0]
    assert migrate.payload["progress"] == pytest.approx(100.0)


def test_same_seed_same_trace():
    def once():
        graph = generate("dock-like", {"n": 40}, seed=3)
        pol = {"provision": {"mode": "dynamic", "growth": "geometric", "start": 2}, "dispatch": {"dispatch_throughput_per_sec": 1000.0}}
        return simulate(graph, nodes=8, seed=3, **pol)[1]

    assert once().trace_lines() == once().trace_lines()


# -------- dispatch variants --------
def test_longest_first_with_known_runtimes():
    _, result = simulate(bag_graph([10.0, 50.0, 30.0]), nodes=1, dispatch={"ordering": "longest-first", "runtimes_known": True})
    assert starts(result) == ["t1", "t2", "t0"]


def test_runtime_priority_change():
    sim = Simulation(bag_graph([1.0, 1.0, 1.0]), platform(1), policy(nodes=1, dispatch={"ordering": "priority"}))
    sim.start()
    sim.set_priority("t2", 10.0)
    assert starts(sim.run())[0] == "t2"


@pytest.mark.parametrize("stealing", [False, True])
def test_push_mode_completes(stealing):
    _, result = simulate(bag_graph([10.0, 30.0, 10.0, 30.0, 10.0, 10.0]), nodes=3, dispatch={"mode": "push", "stealing": stealing})
    assert result.counts["done"] == 6
    assert sorted(starts(result)) == [f"t{i}" for i in range(6)]


def test_hierarchical_dispatch_adds_latency():
    dispatch = {"architecture": "hierarchical", "scheduler_count": 2, "dispatch_throughput_per_sec": 10.0, "dispatch_latency_sec": 0.01}
    _, result = simulate(bag_graph([5.0] * 20), dispatch=dispatch)
    assert result.counts["done"] == 20
    assert result.report.dispatch_p50 > 0


def test_gang_task_occupies_several_nodes():
    graph = bag_graph([10.0, 10.0])
    graph.add_task(TaskSpec(id="mpi", runtime=10.0, width=2))
    _, result = simulate(graph)
    gang = [ev for ev in kinds(result, EventKind.TASK_START) if ev.payload["task"] == "mpi"][0]
    assert gang.payload["nodes"] == [0, 1]
    assert result.report.makespan == 10.0
    assert result.report.utilization == pytest.approx(1.0)


def test_pipeline_group_hands_off_on_same_node():
    graph = gen_pipeline(3, width=1)
    _, result = simulate(graph, nodes=2, dispatch={"pipeline_grouping": True}, data={"intermediate": "peer-to-peer"})
    ends = kinds(result, EventKind.TASK_END)
    assert ends[-1].time == pytest.approx(30.0)
    assert {ev.payload["node"] for ev in ends} == {0}
    assert sum(1 for ev in kinds(result, EventKind.DISPATCH) if ev.payload.get("handoff")) == 2


def test_inputs_are_ready_before_every_start():
    graph = gen_pipeline(3, width=4, intermediate_size=10**6, grouped=False)
    _, result = simulate(graph, nodes=2)
    ended = {}
    for ev in result.trace:
        if ev.kind == EventKind.TASK_END:
            ended[ev.payload["task"]] = ev.time
        elif ev.kind == EventKind.TASK_START:
            spec = graph.tasks[ev.payload["task"]]
            for d in spec.inputs:
                producer = graph.producer.get(d)
                assert producer is None or ended[producer] <= ev.time


# -------- shared file system --------
def test_concurrent_reads_share_gfs_bandwidth():
    graph = gen_sweep(2, runtime=10.0, unique_input_size=10**9)
    _, result = simulate(graph, nodes=2, platform_kw={"gfs_bandwidth_bytes_per_sec": 1e9})
    # both reads split the file system evenly, so neither finishes early
    assert [ev.time for ev in kinds(result, EventKind.TRANSFER_END)] == [pytest.approx(2.0)] * 2
    assert [ev.time for ev in kinds(result, EventKind.TASK_START)] == [pytest.approx(2.0)] * 2
    assert result.report.makespan == pytest.approx(12.0)


# -------- pruning and iteration --------
def test_certain_pruning_walks_one_path():
    _, result = simulate(gen_branch_and_bound(3, prune_probability=1.0), nodes=2)
    # interior completions prune the running sibling; the two leaves both finish
    assert result.counts["done"] == 5
    assert result.counts["pruned"] == 10
    assert len(starts(result)) == 7
    assert [ev.payload["task"] for ev in kinds(result, EventKind.PRUNE_SIGNAL)] == ["bb.n1.1", "bb.n2.1"]


def test_prune_signal_frees_running_sibling_after_dispatch_latency():
    graph = TaskGraph()
    graph.add_data(DataRef(id="seed", size=0, kind=DataKind.INTERMEDIATE))
    graph.add_data(DataRef(id="best", size=0, kind=DataKind.INTERMEDIATE))
    graph.add_task(TaskSpec(id="root", outputs=("seed",), runtime=1.0))
    graph.add_task(TaskSpec(id="fast", inputs=("seed",), outputs=("best",), runtime=10.0, prune=1.0))
    graph.add_task(TaskSpec(id="slow", inputs=("seed",), runtime=100.0))
    graph.add_task(TaskSpec(id="merge", inputs=("best",), runtime=5.0, width=2))
    sim, result = simulate(graph, nodes=2, dispatch={"dispatch_latency_sec": 0.5})

    # root 0.5-1.5, fast and slow start at 2.0, fast ends at 12.0
    signal = kinds(result, EventKind.PRUNE_SIGNAL)
    assert [(ev.time, ev.payload["task"], ev.payload["node"]) for ev in signal] == [(12.5, "slow", 1)]
    assert "slow" not in [ev.payload["task"] for ev in kinds(result, EventKind.TASK_END)]
    # the gang needs slow's node, which comes free with the signal
    merge = [ev for ev in kinds(result, EventKind.TASK_START) if ev.payload["task"] == "merge"][0]
    assert merge.time == pytest.approx(13.0)
    assert merge.payload["nodes"] == [0, 1]
    assert sim.graph.state("slow") == TaskState.PRUNED
    assert result.counts == {"generated": 4, "done": 3, "pruned": 1, "failed": 0}


def test_no_pruning_runs_the_whole_tree():
    _, result = simulate(gen_branch_and_bound(8, prune_probability=0.0), nodes=16)
    assert result.counts["done"] == 511
    assert not kinds(result, EventKind.PRUNE_SIGNAL)


def test_iteration_unfolds_until_convergence():
    graph = gen_iterative(body_size=5, max_iters=10, converge_at=4)
    _, result = simulate(graph)
    assert len(graph) == 20
    assert result.counts["done"] == 20
    assert graph.templates["iter"].closed


# -------- migration --------
def migrating(graph: TaskGraph, nodes: int = 2, enabled: bool = True) -> Simulation:
    sim = Simulation(graph, platform(nodes), policy(nodes=nodes, dispatch={"migration": enabled}))
    sim.advance(40.0)
    return sim


def test_migration_moves_running_task():
    sim = migrating(bag_graph([100.0]))
    sim.migrate("t0", 1)
    result = sim.run()
    assert result.report.makespan == pytest.approx(100.0)
    resumed = kinds(result, EventKind.TASK_START)[-1]
    assert resumed.payload["node"] == 1 and resumed.payload["resume"] == 1
    assert sim.graph.state("t0") == TaskState.DONE


def test_migration_errors():
    with pytest.raises(MigrationError):
        migrating(bag_graph([100.0]), enabled=False).migrate("t0", 1)
    with pytest.raises(DestinationBusyError):
        migrating(bag_graph([100.0, 100.0])).migrate("t0", 1)
    queued = migrating(bag_graph([100.0] * 3))
    with pytest.raises(MigrationError):
        queued.migrate("t2", 1)
    with pytest.raises(UnknownTaskError):
        queued.migrate("ghost", 1)
