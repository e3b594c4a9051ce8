"""Synthetic workload generators for the MTC task patterns and application archetypes.

Every generator is a pure function of its parameters and ``seed``; runtimes are drawn
at generation time from the seeded ``runtimes`` stream.
"""

import logging
from pathlib import Path
from typing import Callable

from src.core.errors import InvalidParametersError, WorkloadFormatError
from src.core.kernel import RngStream, RuntimeDist, sample
from src.core.model import DataKind, DataRef, IterationTemplate, TaskGraph, TaskSpec

logger = logging.getLogger(__name__)

MB = 10**6
GB = 10**9


def as_dist(value) -> RuntimeDist:
    """Accept a number (constant), a mapping, or a RuntimeDist."""
    if isinstance(value, RuntimeDist):
        return value
    if isinstance(value, (int, float)):
        return RuntimeDist.constant(float(value))
    if isinstance(value, dict):
        return RuntimeDist.model_validate(value)
    raise InvalidParametersError(f"cannot read a runtime distribution from {value!r}")


def _pad(n: int) -> int:
    return max(1, len(str(max(n - 1, 0))))


def _draw(dist: RuntimeDist, rng: RngStream) -> float:
    # runtime > 0 is a graph invariant; clamp pathological draws
    return max(sample(dist, rng), 1e-6)


# -------- Patterns --------
def gen_sweep(
    n: int,
    runtime=60.0,
    common_input_size: int = 0,
    unique_input_size: int = 0,
    output_size: int = 0,
    seed: int = 0,
    prefix: str = "sweep",
    timeout: float | None = None,
    max_retries: int | None = None,
    with_estimates: bool = False,
) -> TaskGraph:
    """n independent tasks sharing one common input, each with its own input and output."""
    if n < 1:
        raise InvalidParametersError(f"sweep needs n >= 1, got {n}")
    dist, rng, w = as_dist(runtime), RngStream(seed, "runtimes"), _pad(n)
    graph = TaskGraph()
    common = graph.add_data(DataRef(id=f"{prefix}.common", size=common_input_size, kind=DataKind.COMMON_INPUT))
    for i in range(n):
        unique = graph.add_data(DataRef(id=f"{prefix}.in{i:0{w}d}", size=unique_input_size, kind=DataKind.UNIQUE_INPUT))
        out = graph.add_data(DataRef(id=f"{prefix}.out{i:0{w}d}", size=output_size, kind=DataKind.OUTPUT))
        run = _draw(dist, rng)
        graph.add_task(
            TaskSpec(
                id=f"{prefix}.t{i:0{w}d}",
                inputs=(common, unique),
                outputs=(out,),
                runtime=run,
                estimate=run if with_estimates else None,
                timeout=timeout,
                max_retries=max_retries,
            )
        )
    return graph


def gen_all_pairs(
    m: int,
    k: int,
    runtime=60.0,
    input_size: int = 0,
    result_size: int = 0,
    output_size: int = 0,
    gather_runtime: float = 1.0,
    seed: int = 0,
    prefix: str = "pairs",
) -> TaskGraph:
    """m x k compare tasks, task (i, j) reading left input i and right input j, plus one gather."""
    if m < 1 or k < 1:
        raise InvalidParametersError(f"all-pairs needs m, k >= 1, got ({m}, {k})")
    dist, rng = as_dist(runtime), RngStream(seed, "runtimes")
    wm, wk = _pad(m), _pad(k)
    graph = TaskGraph()
    left = [graph.add_data(DataRef(id=f"{prefix}.a{i:0{wm}d}", size=input_size, kind=DataKind.UNIQUE_INPUT)) for i in range(m)]
    right = [graph.add_data(DataRef(id=f"{prefix}.b{j:0{wk}d}", size=input_size, kind=DataKind.UNIQUE_INPUT)) for j in range(k)]
    results = []
    for i in range(m):
        for j in range(k):
            res = graph.add_data(DataRef(id=f"{prefix}.r{i:0{wm}d}x{j:0{wk}d}", size=result_size, kind=DataKind.INTERMEDIATE))
            graph.add_task(
                TaskSpec(id=f"{prefix}.c{i:0{wm}d}x{j:0{wk}d}", inputs=(left[i], right[j]), outputs=(res,), runtime=_draw(dist, rng))
            )
            results.append(res)
    summary = graph.add_data(DataRef(id=f"{prefix}.summary", size=output_size, kind=DataKind.OUTPUT))
    graph.add_task(TaskSpec(id=f"{prefix}.gather", inputs=results, outputs=(summary,), runtime=gather_runtime, combinable=True))
    return graph


def gen_pipeline(
    stages: int,
    width: int = 1,
    runtime=10.0,
    input_size: int = 0,
    intermediate_size: int = 0,
    output_size: int = 0,
    grouped: bool = True,
    seed: int = 0,
    prefix: str = "pipe",
) -> TaskGraph:
    """``width`` independent chains of ``stages`` tasks; each chain is one pipeline group."""
    if stages < 1 or width < 1:
        raise InvalidParametersError(f"pipeline needs stages, width >= 1, got ({stages}, {width})")
    dist, rng = as_dist(runtime), RngStream(seed, "runtimes")
    wc, ws = _pad(width), _pad(stages)
    graph = TaskGraph()
    for c in range(width):
        chain = f"{prefix}.c{c:0{wc}d}"
        feed = graph.add_data(DataRef(id=f"{chain}.in", size=input_size, kind=DataKind.UNIQUE_INPUT))
        for s in range(stages):
            last = s == stages - 1
            out = graph.add_data(
                DataRef(
                    id=f"{chain}.out" if last else f"{chain}.m{s:0{ws}d}",
                    size=output_size if last else intermediate_size,
                    kind=DataKind.OUTPUT if last else DataKind.INTERMEDIATE,
                )
            )
            graph.add_task(
                TaskSpec(
                    id=f"{chain}.s{s:0{ws}d}",
                    inputs=(feed,),
                    outputs=(out,),
                    runtime=_draw(dist, rng),
                    group=chain if grouped else None,
                )
            )
            feed = out
    return graph


def gen_scatter_gather(
    n: int,
    runtime=60.0,
    common_input_size: int = 0,
    part_size: int = 0,
    output_size: int = 0,
    gather_runtime: float = 1.0,
    combinable: bool = True,
    seed: int = 0,
    prefix: str = "sg",
) -> TaskGraph:
    """One common input scattered to n tasks whose parts are gathered by a single task."""
    if n < 1:
        raise InvalidParametersError(f"scatter-gather needs n >= 1, got {n}")
    dist, rng, w = as_dist(runtime), RngStream(seed, "runtimes"), _pad(n)
    graph = TaskGraph()
    common = graph.add_data(DataRef(id=f"{prefix}.common", size=common_input_size, kind=DataKind.COMMON_INPUT))
    parts = []
    for i in range(n):
        part = graph.add_data(DataRef(id=f"{prefix}.p{i:0{w}d}", size=part_size, kind=DataKind.INTERMEDIATE))
        graph.add_task(TaskSpec(id=f"{prefix}.t{i:0{w}d}", inputs=(common,), outputs=(part,), runtime=_draw(dist, rng)))
        parts.append(part)
    result = graph.add_data(DataRef(id=f"{prefix}.result", size=output_size, kind=DataKind.OUTPUT))
    graph.add_task(TaskSpec(id=f"{prefix}.gather", inputs=parts, outputs=(result,), runtime=gather_runtime, combinable=combinable))
    return graph


def gen_iterative(
    body_size: int,
    max_iters: int,
    runtime=10.0,
    converge_at: int | None = None,
    converge_probability: float = 0.0,
    state_size: int = 0,
    seed: int = 0,
    prefix: str = "iter",
) -> TaskGraph:
    """A loop whose body (``body_size - 1`` workers and one gather) unfolds at runtime."""
    if body_size < 1 or max_iters < 1:
        raise InvalidParametersError(f"iterative needs body_size, max_iters >= 1, got ({body_size}, {max_iters})")
    dist, rng = as_dist(runtime), RngStream(seed, "runtimes")
    graph = TaskGraph()
    seed_item = graph.add_data(DataRef(id=f"{prefix}.seed", size=state_size, kind=DataKind.COMMON_INPUT))
    workers = body_size - 1
    w = _pad(workers)
    data = [DataRef(id="next", size=state_size, kind=DataKind.INTERMEDIATE)]
    tasks = []
    for j in range(workers):
        data.append(DataRef(id=f"part{j:0{w}d}", size=state_size, kind=DataKind.INTERMEDIATE))
        tasks.append(TaskSpec(id=f"w{j:0{w}d}", inputs=("state",), outputs=(f"part{j:0{w}d}",), runtime=_draw(dist, rng)))
    gather_in = [f"part{j:0{w}d}" for j in range(workers)] or ["state"]
    tasks.append(TaskSpec(id="gather", inputs=gather_in, outputs=("next",), runtime=_draw(dist, rng), combinable=True))
    graph.add_template(
        IterationTemplate(
            id=prefix,
            tasks=tasks,
            data=data,
            carry={"state": "next"},
            seed={"state": seed_item},
            gather="gather",
            max_iterations=max_iters,
            converge_at=converge_at,
            converge_probability=converge_probability,
        )
    )
    return graph


def gen_branch_and_bound(
    depth: int,
    branching: int = 2,
    prune_probability: float = 0.5,
    runtime=10.0,
    data_size: int = 0,
    seed: int = 0,
    prefix: str = "bb",
) -> TaskGraph:
    """Full search tree; completing an interior non-root task may prune its unfinished siblings."""
    if depth < 1 or branching < 2:
        raise InvalidParametersError(f"branch-and-bound needs depth >= 1 and branching >= 2, got ({depth}, {branching})")
    dist, rng = as_dist(runtime), RngStream(seed, "runtimes")
    graph = TaskGraph()
    parents: list[str | None] = [None]
    for level in range(depth + 1):
        width = branching**level
        w = _pad(width)
        leaf = level == depth
        outputs = []
        for i in range(width):
            out = graph.add_data(
                DataRef(
                    id=f"{prefix}.d{level}.{i:0{w}d}",
                    size=data_size,
                    kind=DataKind.OUTPUT if leaf else DataKind.INTERMEDIATE,
                )
            )
            parent = parents[i // branching]
            graph.add_task(
                TaskSpec(
                    id=f"{prefix}.n{level}.{i:0{w}d}",
                    inputs=(parent,) if parent else (),
                    outputs=(out,),
                    runtime=_draw(dist, rng),
                    prune=prune_probability if 0 < level < depth else 0.0,
                )
            )
            outputs.append(out)
        parents = outputs
    return graph


# -------- Application archetypes --------
def dock_like(n: int = 1000, seed: int = 0, **overrides) -> TaskGraph:
    params = dict(
        runtime=RuntimeDist.lognormal(713, 560),
        common_input_size=10 * MB,
        unique_input_size=10_000,
        output_size=10_000,
        prefix="dock",
    )
    return gen_sweep(n, seed=seed, **{**params, **overrides})


def blast_like(n: int = 64, seed: int = 0, **overrides) -> TaskGraph:
    params = dict(runtime=60.0, common_input_size=GB, unique_input_size=1_000, output_size=1_000, prefix="blast")
    return gen_sweep(n, seed=seed, **{**params, **overrides})


def deem_like(n: int = 1000, seed: int = 0, **overrides) -> TaskGraph:
    params = dict(
        runtime=RuntimeDist.lognormal(5400, 3600),
        common_input_size=0,
        unique_input_size=1_000,
        output_size=10_000,
        timeout=36000.0,
        max_retries=0,
        prefix="deem",
    )
    return gen_sweep(n, seed=seed, **{**params, **overrides})


def oops_like(n: int = 1000, seed: int = 0, **overrides) -> TaskGraph:
    params = dict(
        runtime=RuntimeDist.uniform(1800, 10800),
        common_input_size=27 * MB,
        unique_input_size=1_000,
        output_size=100_000,
        prefix="oops",
    )
    return gen_sweep(n, seed=seed, **{**params, **overrides})


def social_learning(m: int = 104, seed: int = 0, **overrides) -> TaskGraph:
    params = dict(runtime=RuntimeDist.uniform(300, 1200), input_size=1_000, result_size=1_000, output_size=100_000, prefix="social")
    return gen_all_pairs(m, m, seed=seed, **{**params, **overrides})


def montage_like(
    n: int = 1254,
    image_size: int = 2 * MB,
    mosaic_size: int = 3_700 * MB,
    seed: int = 0,
    prefix: str = "montage",
) -> TaskGraph:
    """Reproject, background fit with a serialized model segment, rectify, co-add."""
    if n < 1:
        raise InvalidParametersError(f"montage needs n >= 1, got {n}")
    rng = RngStream(seed, "runtimes")
    short, medium = RuntimeDist.uniform(2, 6), RuntimeDist.uniform(10, 20)
    w = _pad(n)
    graph = TaskGraph()
    projected, fits = [], []
    for i in range(n):
        raw = graph.add_data(DataRef(id=f"{prefix}.raw{i:0{w}d}", size=image_size, kind=DataKind.UNIQUE_INPUT))
        proj = graph.add_data(DataRef(id=f"{prefix}.proj{i:0{w}d}", size=image_size, kind=DataKind.INTERMEDIATE))
        fit = graph.add_data(DataRef(id=f"{prefix}.fit{i:0{w}d}", size=1_000, kind=DataKind.INTERMEDIATE))
        graph.add_task(TaskSpec(id=f"{prefix}.reproject{i:0{w}d}", inputs=(raw,), outputs=(proj,), runtime=_draw(medium, rng)))
        graph.add_task(TaskSpec(id=f"{prefix}.fit{i:0{w}d}", inputs=(proj,), outputs=(fit,), runtime=_draw(short, rng)))
        projected.append(proj)
        fits.append(fit)

    chain = max(1, n // 10)
    wc = _pad(chain)
    feed = fits
    for s in range(chain):
        model = graph.add_data(DataRef(id=f"{prefix}.model{s:0{wc}d}", size=10_000, kind=DataKind.INTERMEDIATE))
        graph.add_task(TaskSpec(id=f"{prefix}.bgmodel{s:0{wc}d}", inputs=feed, outputs=(model,), runtime=_draw(short, rng)))
        feed = [model]

    rectified = []
    for i in range(n):
        rect = graph.add_data(DataRef(id=f"{prefix}.rect{i:0{w}d}", size=image_size, kind=DataKind.INTERMEDIATE))
        graph.add_task(
            TaskSpec(id=f"{prefix}.rectify{i:0{w}d}", inputs=(projected[i], feed[0]), outputs=(rect,), runtime=_draw(short, rng))
        )
        rectified.append(rect)
    mosaic = graph.add_data(DataRef(id=f"{prefix}.mosaic", size=mosaic_size, kind=DataKind.OUTPUT))
    graph.add_task(TaskSpec(id=f"{prefix}.coadd", inputs=rectified, outputs=(mosaic,), runtime=_draw(medium, rng), combinable=True))
    return graph


ARCHETYPES: dict[str, Callable[..., TaskGraph]] = {
    "sweep": gen_sweep,
    "all-pairs": gen_all_pairs,
    "pipeline-chain": gen_pipeline,
    "scatter-gather": gen_scatter_gather,
    "iterative": gen_iterative,
    "branch-and-bound": gen_branch_and_bound,
    "dock-like": dock_like,
    "blast-like": blast_like,
    "montage-like": montage_like,
    "deem-like": deem_like,
    "oops-like": oops_like,
    "social-learning": social_learning,
}


def generate(archetype: str, params: dict, seed: int) -> TaskGraph:
    if archetype not in ARCHETYPES:
        raise InvalidParametersError(f"unknown archetype {archetype!r}; known: {sorted(ARCHETYPES)}")
    params = dict(params)
    if "runtime" in params:
        params["runtime"] = as_dist(params["runtime"])
    try:
        graph = ARCHETYPES[archetype](seed=seed, **params)
    except TypeError as exc:
        raise InvalidParametersError(f"{archetype}: {exc}") from exc
    logger.info("generated %s workload: %d tasks, %d data items (seed %d)", archetype, len(graph.tasks), len(graph.data), seed)
    return graph


# -------- Workload file format --------
def _task_fields(t: TaskSpec) -> str:
    parts = [f"runtime={t.runtime!r}"]
    if t.estimate is not None:
        parts.append(f"estimate={t.estimate!r}")
    if t.priority:
        parts.append(f"priority={t.priority!r}")
    if t.group:
        parts.append(f"group={t.group}")
    if t.width != 1:
        parts.append(f"width={t.width}")
    if t.timeout is not None:
        parts.append(f"timeout={t.timeout!r}")
    if t.max_retries is not None:
        parts.append(f"retries={t.max_retries}")
    if t.prune:
        parts.append(f"prune={t.prune!r}")
    if t.combinable:
        parts.append("combinable=1")
    parts.append("in=" + ",".join(t.inputs))
    parts.append("out=" + ",".join(t.outputs))
    return " ".join(parts)


def dump_workload(graph: TaskGraph) -> str:
    """Serialize the static part of a graph: data first, then tasks, then iteration templates."""
    instanced = tuple(f"{tpl}.i" for tpl in graph.templates)
    lines = []
    for ref in graph.data.values():
        if not ref.id.startswith(instanced):
            lines.append(f"data {ref.id} size={ref.size} kind={ref.kind.value}")
    for t in graph.tasks.values():
        if not t.id.startswith(instanced):
            lines.append(f"task {t.id} {_task_fields(t)}")
    for cursor in graph.templates.values():
        tpl = cursor.template
        head = [f"template {tpl.id}", f"gather={tpl.gather}", f"max-iters={tpl.max_iterations}"]
        if tpl.converge_at is not None:
            head.append(f"converge-at={tpl.converge_at}")
        if tpl.converge_probability:
            head.append(f"converge-prob={tpl.converge_probability!r}")
        head.append("carry=" + ",".join(f"{k}:{v}" for k, v in sorted(tpl.carry.items())))
        head.append("seed=" + ",".join(f"{k}:{v}" for k, v in sorted(tpl.seed.items())))
        lines.append(" ".join(head))
        for ref in tpl.data:
            lines.append(f"template-data {tpl.id} {ref.id} size={ref.size} kind={ref.kind.value}")
        for t in tpl.tasks:
            lines.append(f"template-task {tpl.id} {t.id} {_task_fields(t)}")
    return "\n".join(lines) + "\n"


def write_workload(graph: TaskGraph, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_workload(graph))
    return path


TASK_KEYS = {
    "runtime": ("runtime", float),
    "estimate": ("estimate", float),
    "priority": ("priority", float),
    "group": ("group", str),
    "width": ("width", int),
    "timeout": ("timeout", float),
    "retries": ("max_retries", int),
    "prune": ("prune", float),
    "combinable": ("combinable", lambda v: v not in ("0", "false", "")),
    "in": ("inputs", lambda v: [d for d in v.split(",") if d]),
    "out": ("outputs", lambda v: [d for d in v.split(",") if d]),
}


def _fields(tokens: list[str], lineno: int) -> dict[str, str]:
    out = {}
    for token in tokens:
        if "=" not in token:
            raise WorkloadFormatError(f"line {lineno}: expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        out[key] = value
    return out


def _task_spec(task_id: str, fields: dict[str, str], lineno: int) -> TaskSpec:
    kwargs = {"id": task_id}
    for key, raw in fields.items():
        if key not in TASK_KEYS:
            raise WorkloadFormatError(f"line {lineno}: unknown task field {key!r}")
        name, cast = TASK_KEYS[key]
        try:
            kwargs[name] = cast(raw)
        except ValueError as exc:
            raise WorkloadFormatError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    if "runtime" not in kwargs:
        raise WorkloadFormatError(f"line {lineno}: task {task_id} has no runtime")
    try:
        return TaskSpec(**kwargs)
    except ValueError as exc:
        raise WorkloadFormatError(f"line {lineno}: {exc}") from exc


def _data_ref(data_id: str, fields: dict[str, str], lineno: int) -> DataRef:
    try:
        return DataRef(id=data_id, size=int(fields["size"]), kind=DataKind(fields["kind"]))
    except (KeyError, ValueError) as exc:
        raise WorkloadFormatError(f"line {lineno}: bad data record for {data_id}: {exc}") from exc


def _pairs(raw: str) -> dict[str, str]:
    return dict(item.split(":", 1) for item in raw.split(",") if item)


def parse_workload(text: str) -> TaskGraph:
    data, tasks, templates = [], [], {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "data" and len(tokens) >= 2:
            data.append(_data_ref(tokens[1], _fields(tokens[2:], lineno), lineno))
        elif kind == "task" and len(tokens) >= 2:
            tasks.append(_task_spec(tokens[1], _fields(tokens[2:], lineno), lineno))
        elif kind == "template" and len(tokens) >= 2:
            fields = _fields(tokens[2:], lineno)
            try:
                templates[tokens[1]] = {
                    "id": tokens[1],
                    "gather": fields["gather"],
                    "max_iterations": int(fields.get("max-iters", 1)),
                    "converge_at": int(fields["converge-at"]) if "converge-at" in fields else None,
                    "converge_probability": float(fields.get("converge-prob", 0)),
                    "carry": _pairs(fields.get("carry", "")),
                    "seed": _pairs(fields.get("seed", "")),
                    "tasks": [],
                    "data": [],
                }
            except (KeyError, ValueError) as exc:
                raise WorkloadFormatError(f"line {lineno}: bad template record: {exc}") from exc
        elif kind in ("template-data", "template-task") and len(tokens) >= 3:
            if tokens[1] not in templates:
                raise WorkloadFormatError(f"line {lineno}: {kind} for undeclared template {tokens[1]}")
            fields = _fields(tokens[3:], lineno)
            if kind == "template-data":
                templates[tokens[1]]["data"].append(_data_ref(tokens[2], fields, lineno))
            else:
                templates[tokens[1]]["tasks"].append(_task_spec(tokens[2], fields, lineno))
        else:
            raise WorkloadFormatError(f"line {lineno}: unrecognized record {line!r}")

    graph = TaskGraph()
    for ref in data:
        graph.add_data(ref)
    for spec in tasks:
        graph.add_task(spec)
    for raw in templates.values():
        try:
            template = IterationTemplate(**raw)
        except ValueError as exc:
            raise WorkloadFormatError(f"template {raw['id']}: {exc}") from exc
        graph.add_template(template)
    return graph


def read_workload(path: str | Path) -> TaskGraph:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise WorkloadFormatError(f"cannot read workload file {path}: {exc}") from exc
    return parse_workload(text)
