from conftest import bag_graph

from src.agents.dispatcher import Dispatcher, chop_threshold, order_key, rank_workers
from src.core.kernel import RngStream
from src.core.model import DataKind, DataRef, TaskGraph, TaskSpec
from src.core.policies import DispatchPolicy


def make(graph, **kw) -> Dispatcher:
    policy = DispatchPolicy(**{"dispatch_throughput_per_sec": None, **kw})
    return Dispatcher(policy, graph, RngStream(0, "placement"))


def test_fifo_pull_assigns_lowest_idle_first():
    graph = bag_graph([1.0, 2.0, 3.0])
    d = make(graph)
    for w in range(2):
        d.add_worker(w)
    for t in graph.take_newly_ready():
        d.enqueue(t)
    out = d.pull_round([1, 0], now=0.0)
    assert [(a.task, a.node) for a in out] == [("t0", 0), ("t1", 1)]
    assert d.ready_count() == 1


def test_longest_first_uses_estimates_unless_runtimes_known():
    graph = TaskGraph()
    graph.add_task(TaskSpec(id="a", runtime=5.0, estimate=50.0))
    graph.add_task(TaskSpec(id="b", runtime=20.0, estimate=10.0))
    graph.add_task(TaskSpec(id="c", runtime=30.0))
    by_estimate = order_key("longest-first", runtimes_known=False)
    ranked = sorted(graph.tasks.values(), key=lambda t: by_estimate(t, 0))
    assert [t.id for t in ranked] == ["a", "b", "c"]
    by_runtime = order_key("longest-first", runtimes_known=True)
    ranked = sorted(graph.tasks.values(), key=lambda t: by_runtime(t, 0))
    assert [t.id for t in ranked] == ["c", "b", "a"]


def test_priority_change_reorders_queue():
    graph = bag_graph([1.0, 1.0])
    d = make(graph, ordering="priority")
    d.add_worker(0)
    for t in graph.take_newly_ready():
        d.enqueue(t)
    graph.set_priority("t1", 5.0)
    d.reprioritize("t1")
    assert d.assign_on_idle(0, 0.0).task == "t1"


def test_throughput_spaces_dispatches_and_hops_add_latency():
    graph = bag_graph([1.0] * 3)
    d = make(graph, architecture="hierarchical", scheduler_count=1, dispatch_throughput_per_sec=10.0, dispatch_latency_sec=0.5)
    for w in range(3):
        d.add_worker(w)
    for t in graph.take_newly_ready():
        d.enqueue(t)
    out = d.pull_round([0, 1, 2], now=0.0)
    assert [a.dispatch_at for a in out] == [0.0, 0.1, 0.2]
    assert out[0].arrive_at == 1.0


def test_rank_workers_by_resident_bytes():
    inputs = [DataRef(id="x", size=100, kind=DataKind.UNIQUE_INPUT), DataRef(id="y", size=10, kind=DataKind.UNIQUE_INPUT)]
    assert rank_workers(inputs, [1, 2, 3], {"x": {3}, "y": {2}}) == [3, 2, 1]
    assert rank_workers(inputs, [2, 1], {}) == [1, 2]


def test_push_respects_backlog_limit_round_robin():
    graph = bag_graph([1.0] * 5)
    d = make(graph, mode="push", backlog_limit=2)
    for w in range(2):
        d.add_worker(w)
    for t in graph.take_newly_ready():
        d.enqueue(t)
    out = d.push_assign(d.schedulers[0], 0.0)
    assert [a.node for a in out] == [0, 1, 0, 1]
    assert d.ready_count() == 1


def test_steal_takes_tail_of_neighbour_backlog():
    graph = bag_graph([1.0] * 3)
    d = make(graph, mode="push", backlog_limit=3, stealing=True, neighbor_count=1)
    d.add_worker(0)
    d.add_worker(1)
    for t in ("t0", "t1", "t2"):
        d.inflight[0] += 1
        d.arrive(0, t)
    assert d.steal(1) == (0, "t2")
    assert d.next_from_backlog(0) == "t0"


def test_removing_worker_returns_stranded_backlog():
    graph = bag_graph([1.0] * 2)
    d = make(graph, mode="push")
    d.add_worker(4)
    d.inflight[4] = 2
    d.arrive(4, "t0")
    d.arrive(4, "t1")
    assert d.remove_worker(4) == ["t0", "t1"]


def test_hierarchical_queue_moves_off_empty_scheduler():
    graph = bag_graph([1.0] * 2)
    d = make(graph, architecture="hierarchical", scheduler_count=2)
    d.add_worker(0)
    d.add_worker(1)
    for t in graph.take_newly_ready():
        d.enqueue(t)
    d.remove_worker(1)
    assert len(d.schedulers[1].queue) == 0
    assert d.ready_count() == 2


def test_gangs_fit_inside_one_grant():
    graph = TaskGraph()
    graph.add_task(TaskSpec(id="mpi", runtime=1.0, width=3))
    d = make(graph)
    d.enqueue("mpi")
    assert d.gang_round({0: [0, 1], 1: [2, 3]}, 0.0) == []
    out = d.gang_round({0: [0, 1], 1: [4, 5, 6]}, 0.0)
    assert out[0].nodes == (4, 5, 6)


def test_chop_threshold_floors():
    assert chop_threshold(4, 0.9) == 3
    assert chop_threshold(10, 0.9) == 9
    assert chop_threshold(3, 0.1) == 1
