import pytest
from conftest import chain_graph

from src.agents.dispatcher import order_key
from src.core.errors import (
    AlreadyDoneError,
    CycleDetectedError,
    DuplicateIdError,
    GroupNotChainError,
    InvalidTransitionError,
    TemplateClosedError,
    UnknownDataRefError,
    UnknownTaskError,
)
from src.core.model import DataKind, DataRef, IterationResult, TaskGraph, TaskSpec, TaskState
from src.core.workloads import gen_branch_and_bound, gen_iterative


def test_chain_becomes_ready_link_by_link():
    graph = chain_graph()
    assert graph.take_newly_ready() == ["t0"]
    graph.transition("t0", TaskState.DISPATCHED)
    graph.transition("t0", TaskState.RUNNING)
    assert graph.mark_done("t0") == ["t1"]
    assert graph.state("t2") == TaskState.PENDING


def test_ready_order_follows_the_dispatch_key():
    graph = TaskGraph()
    for task_id, runtime in [("c", 30.0), ("a", 5.0), ("b", 10.0)]:
        graph.add_task(TaskSpec(id=task_id, runtime=runtime))
    assert graph.ready_tasks() == ["a", "b", "c"]
    assert graph.ready_tasks(order_key("fifo", False)) == ["c", "a", "b"]
    assert graph.ready_tasks(order_key("longest-first", True)) == ["c", "b", "a"]
    assert graph.ready_tasks(order_key("shortest-first", True)) == ["a", "b", "c"]
    graph.set_priority("b", 2.0)
    assert graph.ready_tasks(order_key("priority", False))[0] == "b"


def test_duplicate_and_unknown_references():
    graph = chain_graph()
    with pytest.raises(DuplicateIdError):
        graph.add_task(TaskSpec(id="t0", runtime=1.0))
    with pytest.raises(UnknownDataRefError):
        graph.add_task(TaskSpec(id="x", inputs=("nope",), runtime=1.0))
    with pytest.raises(UnknownTaskError):
        graph.state("ghost")


def test_cycle_is_rejected():
    graph = TaskGraph()
    graph.add_data(DataRef(id="a", size=0, kind=DataKind.INTERMEDIATE))
    graph.add_data(DataRef(id="b", size=0, kind=DataKind.INTERMEDIATE))
    graph.add_task(TaskSpec(id="p", inputs=("b",), outputs=("a",), runtime=1.0))
    with pytest.raises(CycleDetectedError):
        graph.add_task(TaskSpec(id="q", inputs=("a",), outputs=("b",), runtime=1.0))


def test_invalid_transition():
    graph = chain_graph()
    with pytest.raises(InvalidTransitionError):
        graph.transition("t0", TaskState.DONE)


def test_revert_demotes_ready_consumers():
    graph = chain_graph()
    graph.take_newly_ready()
    graph.force_state("t0", TaskState.RUNNING)
    graph.mark_done("t0")
    assert graph.state("t1") == TaskState.READY
    assert graph.revert("t0") == ["t1"]
    assert graph.state("t0") == TaskState.READY
    assert graph.state("t1") == TaskState.PENDING


def test_prune_takes_exclusive_descendants_only():
    graph = TaskGraph()
    for d in ("a", "b"):
        graph.add_data(DataRef(id=d, size=0, kind=DataKind.INTERMEDIATE))
    graph.add_data(DataRef(id="c", size=0, kind=DataKind.OUTPUT))
    graph.add_task(TaskSpec(id="pa", outputs=("a",), runtime=1.0))
    graph.add_task(TaskSpec(id="pb", outputs=("b",), runtime=1.0))
    graph.add_task(TaskSpec(id="join", inputs=("a", "b"), outputs=("c",), runtime=1.0))
    assert graph.prune_tasks("pa") == {"pa"}
    # the pruned input is void, so join only waits for b
    assert "a" in graph.voided
    graph.force_state("pb", TaskState.RUNNING)
    assert graph.mark_done("pb") == ["join"]
    assert [r.id for r in graph.inputs_of("join")] == ["b"]


def test_prune_of_done_task_fails():
    graph = chain_graph()
    graph.force_state("t0", TaskState.RUNNING)
    graph.mark_done("t0")
    with pytest.raises(AlreadyDoneError):
        graph.prune_tasks("t0")


def test_branch_and_bound_tree_pruning():
    graph = gen_branch_and_bound(depth=3, branching=2, prune_probability=1.0)
    assert len(graph) == 15
    gone = graph.prune_tasks("bb.n1.1")
    assert len(gone) == 7
    assert graph.siblings("bb.n2.0") == ["bb.n2.1"]


def test_group_must_be_a_chain():
    graph = TaskGraph()
    graph.add_data(DataRef(id="x", size=0, kind=DataKind.INTERMEDIATE))
    for d in ("y", "z"):
        graph.add_data(DataRef(id=d, size=0, kind=DataKind.OUTPUT))
    graph.add_task(TaskSpec(id="root", outputs=("x",), runtime=1.0, group="g"))
    graph.add_task(TaskSpec(id="l", inputs=("x",), outputs=("y",), runtime=1.0, group="g"))
    graph.add_task(TaskSpec(id="r", inputs=("x",), outputs=("z",), runtime=1.0, group="g"))
    with pytest.raises(GroupNotChainError):
        graph.validate()


def test_iteration_unfolds_until_max_then_closes():
    graph = gen_iterative(body_size=5, max_iters=4)
    assert len(graph) == 5
    for k in range(1, 4):
        assert len(graph.unfold_iteration("iter", IterationResult(k, converged=False))) == 5
    assert len(graph) == 20
    assert graph.unfold_iteration("iter", IterationResult(4, converged=False)) == set()
    assert graph.templates["iter"].closed
    with pytest.raises(TemplateClosedError):
        graph.unfold_iteration("iter", IterationResult(5, converged=False))


def test_iteration_carries_previous_gather_output():
    graph = gen_iterative(body_size=2, max_iters=3)
    graph.unfold_iteration("iter", IterationResult(1, converged=False))
    assert graph.tasks["iter.i2.w0"].inputs == ("iter.i1.next",)
    assert graph.gather_of("iter.i2.gather") == ("iter", 2)


def test_converged_iteration_closes_template():
    graph = gen_iterative(body_size=3, max_iters=10)
    assert graph.unfold_iteration("iter", IterationResult(1, converged=True)) == set()
    assert graph.all_settled() is False


def test_reset_and_restore():
    graph = chain_graph()
    graph.restore({"t0": TaskState.DONE, "t1": TaskState.RUNNING, "t2": TaskState.PENDING})
    assert graph.state("t1") == TaskState.READY
    assert graph.state("t2") == TaskState.PENDING
    assert "m0" in graph.available
