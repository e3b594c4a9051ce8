import numpy as np
import pytest

from src.core.errors import InvalidParametersError, WorkloadFormatError
from src.core.model import DataKind, TaskState
from src.core.workloads import (
    ARCHETYPES,
    dump_workload,
    gen_branch_and_bound,
    gen_iterative,
    gen_pipeline,
    gen_scatter_gather,
    gen_sweep,
    generate,
    parse_workload,
    read_workload,
    write_workload,
)


def test_sweep_shape():
    graph = gen_sweep(12, common_input_size=100, prefix="s")
    assert len(graph.tasks) == 12
    assert graph.tasks["s.t00"].inputs[0] == "s.common"
    assert graph.data["s.common"].kind == DataKind.COMMON_INPUT
    assert len(graph.ready_tasks()) == 12


def test_pipeline_groups_each_chain():
    graph = gen_pipeline(3, width=2)
    assert sorted(graph.groups()) == ["pipe.c0", "pipe.c1"]
    assert graph.group_chain("pipe.c1") == ["pipe.c1.s0", "pipe.c1.s1", "pipe.c1.s2"]
    assert graph.data["pipe.c0.m0"].kind == DataKind.INTERMEDIATE


def test_scatter_gather_has_one_combinable_gather():
    graph = gen_scatter_gather(5)
    assert len(graph.tasks) == 6
    assert graph.tasks["sg.gather"].combinable
    assert len(graph.tasks["sg.gather"].inputs) == 5


def test_branch_and_bound_is_a_full_tree():
    graph = gen_branch_and_bound(3)
    assert len(graph.tasks) == 15
    assert graph.tasks["bb.n0.0"].prune == 0.0
    assert graph.tasks["bb.n2.3"].prune == 0.5
    assert graph.tasks["bb.n3.7"].prune == 0.0
    assert graph.children("bb.n0.0") == ["bb.n1.0", "bb.n1.1"]


def test_iterative_instantiates_first_body():
    graph = gen_iterative(body_size=3, max_iters=4)
    ready = graph.ready_tasks()
    assert ready == ["iter.i1.w0", "iter.i1.w1"]
    assert graph.state("iter.i1.gather") == TaskState.PENDING


def test_generation_is_seeded():
    first = dump_workload(generate("dock-like", {"n": 50}, seed=3))
    assert first == dump_workload(generate("dock-like", {"n": 50}, seed=3))
    assert first != dump_workload(generate("dock-like", {"n": 50}, seed=4))


def test_dock_like_runtime_moments():
    graph = generate("dock-like", {"n": 1000}, seed=11)
    runtimes = np.array([t.runtime for t in graph.tasks.values()])
    assert runtimes.mean() == pytest.approx(713, rel=0.1)
    assert runtimes.std() == pytest.approx(560, rel=0.3)
    assert graph.data["dock.common"].size == 10**7


def test_every_archetype_generates():
    small = {"sweep": {"n": 3}, "all-pairs": {"m": 2, "k": 2}, "pipeline-chain": {"stages": 2},
             "scatter-gather": {"n": 3}, "iterative": {"body_size": 2, "max_iters": 2},
             "branch-and-bound": {"depth": 2}, "dock-like": {"n": 3}, "blast-like": {"n": 3},
             "montage-like": {"n": 3}, "deem-like": {"n": 3}, "oops-like": {"n": 3},
             "social-learning": {"m": 2}}
    assert set(small) == set(ARCHETYPES)
    for name, params in small.items():
        assert len(generate(name, params, seed=0)) > 0


def test_runtime_distribution_from_params():
    graph = generate("sweep", {"n": 20, "runtime": {"dist": "uniform", "low": 5, "high": 6}}, seed=0)
    assert all(5 <= t.runtime <= 6 for t in graph.tasks.values())


def test_bad_generator_params():
    with pytest.raises(InvalidParametersError):
        generate("quantum", {}, seed=0)
    with pytest.raises(InvalidParametersError):
        generate("sweep", {"n": 0}, seed=0)
    with pytest.raises(InvalidParametersError):
        generate("sweep", {"n": 2, "colour": "red"}, seed=0)


def test_workload_file_keeps_templates_and_groups(tmp_path):
    graph = gen_iterative(body_size=2, max_iters=3, prefix="loop")
    pipeline = gen_pipeline(2, width=2, intermediate_size=10)
    for ref in pipeline.data.values():
        graph.add_data(ref)
    for spec in pipeline.tasks.values():
        graph.add_task(spec.model_copy())
    path = write_workload(graph, tmp_path / "mixed.wl")
    again = read_workload(path)
    assert dump_workload(again) == dump_workload(graph)
    assert again.tasks["pipe.c1.s1"].group == "pipe.c1"
    assert "loop.i1.gather" in again.tasks


def test_oracle_file_parses():
    graph = parse_workload("# comment\ntask a runtime=5 in= out=\ntask b runtime=7.5 retries=2\n")
    assert graph.tasks["b"].runtime == 7.5
    assert graph.tasks["b"].max_retries == 2


@pytest.mark.parametrize(
    "text",
    [
        "task a in= out=",
        "task a runtime=fast",
        "task a runtime=1 colour=red",
        "task a runtime=1 lonely",
        "data d size=10 kind=mystery",
        "template-task loop w runtime=1",
        "flow a b",
    ],
)
def test_malformed_workload_lines(text):
    with pytest.raises(WorkloadFormatError):
        parse_workload(text)


def test_missing_workload_file(tmp_path):
    with pytest.raises(WorkloadFormatError):
        read_workload(tmp_path / "absent.wl")
