"""Dynamic task graph: tasks, data items, dependencies, runtime unfolding and pruning."""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import networkx as nx
from pydantic import ConfigDict, Field, field_validator

from src.core.errors import (
    AlreadyDoneError,
    CycleDetectedError,
    DuplicateIdError,
    GroupNotChainError,
    InvalidProducerError,
    InvalidTransitionError,
    TemplateClosedError,
    UnknownDataRefError,
    UnknownTaskError,
    UnknownTemplateError,
)
from src.core.utils import SpecModel

logger = logging.getLogger(__name__)


class DataKind(str, Enum):
    COMMON_INPUT = "common-input"
    UNIQUE_INPUT = "unique-input"
    INTERMEDIATE = "intermediate"
    OUTPUT = "output"

    @property
    def is_input(self) -> bool:
        return self in (DataKind.COMMON_INPUT, DataKind.UNIQUE_INPUT)


class TaskState(str, Enum):
    PENDING = "pending"
    READY = "ready"
    DISPATCHED = "dispatched"
    RUNNING = "running"
    DONE = "done"
    PRUNED = "pruned"
    FAILED = "failed"


TERMINAL = {TaskState.DONE, TaskState.PRUNED, TaskState.FAILED}

# failed is terminal only once retries are exhausted; the graph cannot tell, the engine can.
TRANSITIONS: dict[TaskState, set[TaskState]] = {
    TaskState.PENDING: {TaskState.READY, TaskState.PRUNED},
    TaskState.READY: {TaskState.DISPATCHED, TaskState.PRUNED, TaskState.PENDING},
    TaskState.DISPATCHED: {TaskState.RUNNING, TaskState.PRUNED, TaskState.READY},
    TaskState.RUNNING: {TaskState.DONE, TaskState.PRUNED, TaskState.FAILED, TaskState.READY},
    TaskState.FAILED: {TaskState.READY},
    TaskState.DONE: {TaskState.READY, TaskState.PENDING},
    TaskState.PRUNED: set(),
}


class DataRef(SpecModel):
    id: str
    size: int = Field(ge=0)
    kind: DataKind


class TaskSpec(SpecModel):
    model_config = ConfigDict(frozen=False)

    id: str
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    runtime: float = Field(gt=0)
    estimate: float | None = Field(default=None, gt=0)
    priority: float = 0.0
    group: str | None = None
    width: int = Field(default=1, ge=1)
    timeout: float | None = Field(default=None, gt=0)
    max_retries: int | None = Field(default=None, ge=0)
    prune: float = Field(default=0.0, ge=0, le=1)
    combinable: bool = False
    state: TaskState = TaskState.PENDING

    @field_validator("inputs", "outputs", mode="before")
    @classmethod
    def _sorted_set(cls, value):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(sorted(set(value)))


class IterationTemplate(SpecModel):
    """A loop body instantiated once per iteration with fresh ids.

    ``carry`` maps a body input to the body output of the previous iteration that feeds it;
    ``seed`` names the existing data item feeding that input on the first iteration.
    """

    id: str
    tasks: list[TaskSpec]
    data: list[DataRef] = Field(default_factory=list)
    carry: dict[str, str] = Field(default_factory=dict)
    seed: dict[str, str] = Field(default_factory=dict)
    gather: str
    max_iterations: int = Field(default=1, ge=1)
    converge_at: int | None = Field(default=None, ge=1)
    converge_probability: float = Field(default=0.0, ge=0, le=1)


@dataclass
class IterationResult:
    iteration: int
    converged: bool


@dataclass
class TemplateCursor:
    template: IterationTemplate
    instantiations: int = 0
    closed: bool = False


def instance_id(template_id: str, iteration: int, local: str) -> str:
    return f"{template_id}.i{iteration}.{local}"


class TaskGraph:
    """Single-writer task graph. The instantiated part is a DAG at all times."""

    def __init__(self):
        self.tasks: dict[str, TaskSpec] = {}
        self.data: dict[str, DataRef] = {}
        self.producer: dict[str, str] = {}
        self.consumers: dict[str, set[str]] = {}
        self.dag = nx.DiGraph()
        self.available: set[str] = set()
        self.voided: set[str] = set()
        self.missing: dict[str, int] = {}
        self.templates: dict[str, TemplateCursor] = {}
        self._gathers: dict[str, tuple[str, int]] = {}
        self._newly_ready: list[str] = []
        self.ready_order: dict[str, int] = {}
        self._ready_seq = itertools.count()

    def __len__(self) -> int:
        return len(self.tasks)

    # -------- construction --------
    def add_data(self, ref: DataRef) -> str:
        if ref.id in self.data:
            raise DuplicateIdError(f"data {ref.id} already exists")
        self.data[ref.id] = ref
        self.consumers.setdefault(ref.id, set())
        if ref.kind.is_input:
            self.available.add(ref.id)
        return ref.id

    def add_task(self, spec: TaskSpec) -> str:
        if spec.id in self.tasks:
            raise DuplicateIdError(f"task {spec.id} already exists")
        for ref in (*spec.inputs, *spec.outputs):
            if ref not in self.data:
                raise UnknownDataRefError(f"task {spec.id} references unknown data {ref}")
        for out in spec.outputs:
            if self.data[out].kind.is_input:
                raise InvalidProducerError(f"{out} is {self.data[out].kind.value} and cannot be produced")
            if out in self.producer:
                raise InvalidProducerError(f"{out} already produced by {self.producer[out]}")
        if set(spec.inputs) & set(spec.outputs):
            raise CycleDetectedError(f"task {spec.id} consumes its own output")

        upstream = {self.producer[d] for d in spec.inputs if d in self.producer}
        downstream = {c for out in spec.outputs for c in self.consumers[out]}
        for consumer in downstream:
            for prod in upstream:
                if consumer == prod or nx.has_path(self.dag, consumer, prod):
                    raise CycleDetectedError(f"adding {spec.id} closes a cycle through {consumer}")

        self.tasks[spec.id] = spec
        self.dag.add_node(spec.id)
        for prod in upstream:
            self.dag.add_edge(prod, spec.id)
        for out in spec.outputs:
            self.producer[out] = spec.id
            for consumer in self.consumers[out]:
                self.dag.add_edge(spec.id, consumer)
        for d in spec.inputs:
            self.consumers[d].add(spec.id)

        self.missing[spec.id] = sum(1 for d in spec.inputs if not self._usable(d))
        spec.state = TaskState.READY if self.missing[spec.id] == 0 else TaskState.PENDING
        if spec.state == TaskState.READY:
            self._became_ready(spec.id)
        return spec.id

    def _became_ready(self, task_id: str) -> None:
        self.ready_order[task_id] = next(self._ready_seq)
        self._newly_ready.append(task_id)

    def _usable(self, data_id: str) -> bool:
        return data_id in self.available or data_id in self.voided

    def validate(self) -> None:
        """Whole-graph checks once construction is over."""
        for data_id, ref in self.data.items():
            if not ref.kind.is_input and data_id not in self.producer:
                raise InvalidProducerError(f"{ref.kind.value} {data_id} has no producer")
        for group in self.groups():
            self.group_chain(group)

    # -------- queries --------
    def state(self, task_id: str) -> TaskState:
        return self._task(task_id).state

    def _task(self, task_id: str) -> TaskSpec:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTaskError(f"unknown task {task_id}") from None

    def ready_tasks(self, key: Callable[[TaskSpec, int], object] | None = None) -> list[str]:
        """Tasks whose inputs are all available and that are waiting for dispatch.

        ``key(task, seq)`` gets the order in which each task became ready, so a scheduler
        queue key (``dispatcher.order_key``) reproduces the dispatch order. Without a key
        the list is in priority order, ties by id.
        """
        ready = [t for t in self.tasks.values() if t.state == TaskState.READY]
        if key is None:
            ready.sort(key=lambda t: (-t.priority, t.id))
        else:
            ready.sort(key=lambda t: key(t, self.ready_order.get(t.id, 0)))
        return [t.id for t in ready]

    def take_newly_ready(self) -> list[str]:
        out, self._newly_ready = self._newly_ready, []
        return [t for t in dict.fromkeys(out) if self.tasks[t].state == TaskState.READY]

    def inputs_of(self, task_id: str) -> list[DataRef]:
        """Inputs that must be staged (void inputs are skipped)."""
        return [self.data[d] for d in self._task(task_id).inputs if d not in self.voided]

    def children(self, task_id: str) -> list[str]:
        return sorted(self.dag.successors(task_id))

    def siblings(self, task_id: str) -> list[str]:
        spec = self._task(task_id)
        sibs = {c for d in spec.inputs if d in self.producer for c in self.consumers[d]}
        sibs.discard(task_id)
        return sorted(sibs)

    def counts(self) -> dict[str, int]:
        out = {s.value: 0 for s in TaskState}
        for t in self.tasks.values():
            out[t.state.value] += 1
        return out

    def all_settled(self) -> bool:
        """Every task terminal and every template closed."""
        if any(t.state not in TERMINAL for t in self.tasks.values()):
            return False
        return all(c.closed for c in self.templates.values())

    # -------- transitions --------
    def transition(self, task_id: str, new: TaskState) -> None:
        spec = self._task(task_id)
        if new not in TRANSITIONS[spec.state]:
            raise InvalidTransitionError(f"{task_id}: {spec.state.value} -> {new.value}")
        spec.state = new

    def force_state(self, task_id: str, new: TaskState) -> None:
        self._task(task_id).state = new

    def set_priority(self, task_id: str, priority: float) -> None:
        self._task(task_id).priority = priority

    def mark_done(self, task_id: str) -> list[str]:
        """Complete a task; returns the consumers that became ready."""
        self.transition(task_id, TaskState.DONE)
        before = len(self._newly_ready)
        for out in self.tasks[task_id].outputs:
            self._make_available(out)
        return sorted(self._newly_ready[before:])

    def _make_available(self, data_id: str) -> None:
        if data_id in self.available:
            return
        self.available.add(data_id)
        for consumer in sorted(self.consumers[data_id]):
            self._input_arrived(consumer)

    def _input_arrived(self, task_id: str) -> None:
        spec = self.tasks[task_id]
        if spec.state != TaskState.PENDING:
            return
        self.missing[task_id] -= 1
        if self.missing[task_id] == 0:
            spec.state = TaskState.READY
            self._became_ready(task_id)

    def revert(self, task_id: str) -> list[str]:
        """Send a done task back for re-execution because its outputs were lost.

        Returns consumers pushed back to pending.
        """
        spec = self._task(task_id)
        if spec.state != TaskState.DONE:
            raise InvalidTransitionError(f"{task_id}: only done tasks can be reverted")
        demoted = []
        for out in spec.outputs:
            if out not in self.available:
                continue
            self.available.discard(out)
            for consumer in sorted(self.consumers[out]):
                c = self.tasks[consumer]
                if c.state in (TaskState.PENDING, TaskState.READY):
                    self.missing[consumer] += 1
                    if c.state == TaskState.READY:
                        c.state = TaskState.PENDING
                        demoted.append(consumer)
        self.missing[task_id] = sum(1 for d in spec.inputs if not self._usable(d))
        spec.state = TaskState.READY if self.missing[task_id] == 0 else TaskState.PENDING
        if spec.state == TaskState.READY:
            self._became_ready(task_id)
        return demoted

    def reset(self, task_id: str) -> TaskState:
        """Put an unfinished task back to ready or pending from its current inputs."""
        spec = self._task(task_id)
        self.missing[task_id] = sum(1 for d in spec.inputs if not self._usable(d))
        spec.state = TaskState.READY if self.missing[task_id] == 0 else TaskState.PENDING
        if spec.state == TaskState.READY:
            self._became_ready(task_id)
        return spec.state

    def restore(self, states: dict[str, TaskState]) -> None:
        """Apply saved task states: done outputs become available, pruned outputs void,
        everything unfinished is recomputed as ready or pending."""
        self._newly_ready = []
        for task_id, state in states.items():
            self._task(task_id).state = state
            if state == TaskState.DONE:
                self.available.update(self.tasks[task_id].outputs)
        for task_id, state in states.items():
            if state == TaskState.PRUNED:
                self.voided.update(d for d in self.tasks[task_id].outputs if d not in self.available)
        for task_id in sorted(self.tasks):
            if self.tasks[task_id].state not in TERMINAL:
                self.reset(task_id)

    # -------- pruning --------
    def prune_tasks(self, root: str) -> set[str]:
        """Prune ``root`` and every unfinished descendant reachable only through it."""
        spec = self._task(root)
        if spec.state == TaskState.DONE:
            raise AlreadyDoneError(f"cannot prune completed task {root}")
        if spec.state in (TaskState.PRUNED, TaskState.FAILED):
            return set()

        gone = {root}
        below = nx.descendants(self.dag, root)
        for task_id in nx.topological_sort(self.dag.subgraph(below)):
            t = self.tasks[task_id]
            if t.state in TERMINAL:
                continue
            preds = set(self.dag.predecessors(task_id))
            if all(p in gone or self.tasks[p].state in (TaskState.PRUNED, TaskState.FAILED) for p in preds):
                gone.add(task_id)

        for task_id in sorted(gone):
            self.tasks[task_id].state = TaskState.PRUNED
        for task_id in sorted(gone):
            for out in self.tasks[task_id].outputs:
                self._void(out)
        logger.debug("pruned %d tasks from %s", len(gone), root)
        return gone

    def _void(self, data_id: str) -> None:
        if data_id in self.voided or data_id in self.available:
            return
        self.voided.add(data_id)
        for consumer in sorted(self.consumers[data_id]):
            self._input_arrived(consumer)

    # -------- pipeline groups --------
    def groups(self) -> list[str]:
        return sorted({t.group for t in self.tasks.values() if t.group})

    def group_chain(self, group: str) -> list[str]:
        """Members of a pipeline group in chain order; raises if they do not form a chain."""
        members = {t.id for t in self.tasks.values() if t.group == group}
        sub = self.dag.subgraph(members)
        order = list(nx.topological_sort(sub))
        for a, b in zip(order, order[1:]):
            if not sub.has_edge(a, b):
                raise GroupNotChainError(f"group {group}: {a} does not feed {b}")
        if any(sub.out_degree(m) > 1 or sub.in_degree(m) > 1 for m in members):
            raise GroupNotChainError(f"group {group} branches")
        return order

    # -------- iteration --------
    def add_template(self, template: IterationTemplate) -> set[str]:
        """Register an iteration template and instantiate its first iteration."""
        if template.id in self.templates:
            raise DuplicateIdError(f"template {template.id} already exists")
        local_tasks = {t.id for t in template.tasks}
        if template.gather not in local_tasks:
            raise UnknownTaskError(f"template {template.id}: gather {template.gather} is not a body task")
        unseeded = set(template.carry) - set(template.seed)
        if unseeded:
            raise UnknownDataRefError(f"template {template.id}: carried inputs {sorted(unseeded)} have no seed")
        for body_in, data_id in template.seed.items():
            if data_id not in self.data:
                raise UnknownDataRefError(f"template {template.id}: seed {data_id} for {body_in} is unknown")
        cursor = TemplateCursor(template)
        self.templates[template.id] = cursor
        return self._instantiate(cursor)

    def unfold_iteration(self, template_id: str, result: IterationResult) -> set[str]:
        cursor = self.templates.get(template_id)
        if cursor is None:
            raise UnknownTemplateError(f"unknown template {template_id}")
        if cursor.closed:
            raise TemplateClosedError(f"template {template_id} is closed")
        if result.converged or cursor.instantiations >= cursor.template.max_iterations:
            cursor.closed = True
            logger.debug("template %s closed after %d iterations", template_id, cursor.instantiations)
            return set()
        return self._instantiate(cursor)

    def gather_of(self, task_id: str) -> tuple[str, int] | None:
        """(template id, iteration) if the task is an iteration gather."""
        return self._gathers.get(task_id)

    def _instantiate(self, cursor: TemplateCursor) -> set[str]:
        tpl = cursor.template
        k = cursor.instantiations + 1
        local_data = {d.id for d in tpl.data}

        def resolve(name: str) -> str:
            if name in local_data:
                return instance_id(tpl.id, k, name)
            if name in tpl.carry:
                if k == 1:
                    return tpl.seed[name]
                return instance_id(tpl.id, k - 1, tpl.carry[name])
            return name

        for ref in tpl.data:
            self.add_data(ref.model_copy(update={"id": instance_id(tpl.id, k, ref.id)}))
        new = set()
        for body in tpl.tasks:
            spec = body.model_copy(
                update={
                    "id": instance_id(tpl.id, k, body.id),
                    "inputs": tuple(sorted(resolve(d) for d in body.inputs)),
                    "outputs": tuple(sorted(resolve(d) for d in body.outputs)),
                    "group": instance_id(tpl.id, k, body.group) if body.group else None,
                    "state": TaskState.PENDING,
                }
            )
            new.add(self.add_task(spec))
        self._gathers[instance_id(tpl.id, k, tpl.gather)] = (tpl.id, k)
        cursor.instantiations = k
        return new
