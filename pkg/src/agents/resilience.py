"""Failure injection, retry decisions, checkpointing and recovery onto a new allocation."""

import json
import logging
from pathlib import Path

from pydantic import Field, ValidationError

from src.core.errors import CorruptCheckpointError, UnknownScopeError
from src.core.kernel import EventKind
from src.core.model import DataKind, DataRef, IterationTemplate, TaskGraph, TaskSpec, TaskState, TemplateCursor, instance_id
from src.core.platform import PlatformSpec
from src.core.policies import FailureSpec, PolicyConfig, ProvisionPolicy
from src.core.utils import SpecModel

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TemplateRecord(SpecModel):
    template: IterationTemplate
    instantiations: int
    closed: bool


class Checkpoint(SpecModel):
    """Engine snapshot between two events. Enough to rebuild the graph and resume elsewhere."""

    version: int = CHECKPOINT_VERSION
    snapshot_time: float
    seed: int
    task_states: dict[str, TaskState]
    attempts: dict[str, int] = Field(default_factory=dict)
    failure_counts: dict[str, int] = Field(default_factory=dict)
    tasks: list[TaskSpec]
    data: list[DataRef]
    templates: list[TemplateRecord] = Field(default_factory=list)
    gfs_data: list[str] = Field(default_factory=list)
    directory: dict[str, list[int]] = Field(default_factory=dict)
    provisioner_cursor: int = 0
    pending_flush: dict[str, int] = Field(default_factory=dict)

    @property
    def done_fraction(self) -> float:
        if not self.task_states:
            return 1.0
        done = sum(1 for s in self.task_states.values() if s == TaskState.DONE)
        return done / len(self.task_states)

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise CorruptCheckpointError(f"checkpoint is not valid JSON: {e}") from None
        if not isinstance(raw, dict) or raw.get("version") != CHECKPOINT_VERSION:
            raise CorruptCheckpointError(f"unsupported checkpoint version {raw.get('version') if isinstance(raw, dict) else raw!r}")
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise CorruptCheckpointError(f"checkpoint failed validation: {e.error_count()} errors") from None


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(checkpoint.dumps(), encoding="utf-8")
    logger.info("checkpoint at t=%.3f written to %s", checkpoint.snapshot_time, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CorruptCheckpointError(f"no checkpoint at {path}")
    return Checkpoint.loads(path.read_text(encoding="utf-8"))


class Resilience:
    """Failure bookkeeping for one simulation."""

    def __init__(self, sim):
        self.sim = sim
        self.policy = sim.policy.resilience
        self.failure_counts: dict[str, int] = {}
        self._fraction_specs: list[FailureSpec] = []
        self._rate_specs = [f for f in self.policy.failures if f.rate_per_node_hour]
        self._rate_events: dict[int, object] = {}
        self._checkpoint_event = None
        self.checkpoints: list[Checkpoint] = []

    # -------- arming --------
    def arm(self) -> None:
        for spec in self.policy.failures:
            if spec.rate_per_node_hour is not None or spec.after_sec is not None:
                self._check_scope(spec)
                continue
            if spec.at_sec is not None and spec.at_sec < self.sim.kernel.clock:
                continue
            self.inject(spec)
        if self.policy.checkpoint_every_sec:
            self._arm_checkpoint()

    def _check_scope(self, spec: FailureSpec) -> None:
        platform = self.sim.platform
        if spec.node is not None and spec.node >= platform.node_count:
            raise UnknownScopeError(f"node {spec.node} does not exist (machine has {platform.node_count})")
        if spec.block is not None and spec.block >= platform.block_count:
            raise UnknownScopeError(f"block {spec.block} does not exist (machine has {platform.block_count})")
        if spec.task is not None and spec.task not in self.sim.graph.tasks:
            raise UnknownScopeError(f"task {spec.task} does not exist")

    def inject(self, spec: FailureSpec) -> None:
        """Schedule a failure; fraction-timed failures wait for enough completions."""
        self._check_scope(spec)
        if spec.at_fraction is not None:
            self._fraction_specs.append(spec)
            return
        if spec.at_sec is None:
            return
        self.sim.at(EventKind.FAILURE_INJECTED, spec.at_sec, lambda ev, s=spec: self._apply(s), **_describe(spec))

    def on_completion(self, done: int, total: int) -> None:
        fired = [s for s in self._fraction_specs if done >= s.at_fraction * total - 1e-9]
        for spec in fired:
            self._fraction_specs.remove(spec)
            self.sim.kernel.emit(EventKind.FAILURE_INJECTED, **_describe(spec))
            self._apply(spec)
            if self.sim.halted:
                return

    # -------- rate-driven node failures --------
    def nodes_granted(self, nodes: list[int]) -> None:
        for node in nodes:
            self._arm_rate(node)

    def _arm_rate(self, node: int) -> None:
        if not self._rate_specs:
            return
        stream = self.sim.rng.stream("failures")
        draws = [(stream.generator.exponential(3600.0 / s.rate_per_node_hour), i) for i, s in enumerate(self._rate_specs) if s.rate_per_node_hour > 0]
        if not draws:
            return
        delay, i = min(draws)
        spec = self._rate_specs[i]
        self._rate_events[node] = self.sim.at(
            EventKind.FAILURE_INJECTED,
            self.sim.kernel.clock + float(delay),
            lambda ev, s=spec, n=node: self._rate_fired(s, n),
            kind=spec.kind, node=node, persistence=spec.persistence,
        )

    def _rate_fired(self, spec: FailureSpec, node: int) -> None:
        self._rate_events.pop(node, None)
        self.sim.fail_node(node, spec.kind, spec.persistence == "permanent")

    def node_gone(self, node: int) -> None:
        self.sim.cancel(self._rate_events.pop(node, None))

    def node_back(self, node: int) -> None:
        self._arm_rate(node)

    def disarm(self) -> None:
        for node in list(self._rate_events):
            self.node_gone(node)
        self.sim.cancel(self._checkpoint_event)
        self._checkpoint_event = None

    # -------- applying failures --------
    def _apply(self, spec: FailureSpec) -> None:
        sim = self.sim
        logger.debug("failure %s fired at t=%.3f", spec.kind, sim.kernel.clock)
        if spec.kind == "strategic":
            if self.policy.strategic_action == "halt":
                sim.halt()
            else:
                sim.chop_tail()
            return
        if spec.kind == "application":
            attempt = sim.attempts.get(spec.task)
            if attempt is not None and attempt.started:
                sim.fail_attempt(attempt, "application")
            return
        permanent = spec.persistence == "permanent"
        for node in self._nodes_in_scope(spec):
            sim.fail_node(node, spec.kind, permanent)

    def _nodes_in_scope(self, spec: FailureSpec) -> list[int]:
        if spec.node is not None:
            return [spec.node]
        if spec.block is not None:
            return list(self.sim.machine.block_nodes[spec.block])
        attempt = self.sim.attempts.get(spec.task)
        return list(attempt.nodes) if attempt is not None and attempt.started else []

    def attempt_deadline(self, task_id: str, started_at: float) -> tuple[float, str] | None:
        """Earliest forced end of an attempt: its timeout or a permanent application fault."""
        task = self.sim.graph.tasks[task_id]
        candidates = []
        if task.timeout is not None:
            candidates.append((started_at + task.timeout, "timeout"))
        for spec in self.policy.failures:
            if spec.after_sec is not None and spec.task == task_id:
                candidates.append((started_at + spec.after_sec, "application"))
        return min(candidates) if candidates else None

    def on_failure(self, task_id: str, kind: str) -> str:
        """Outcome of a failed attempt: retry, requeue (strategic) or final."""
        if kind in ("hardware", "os"):
            return "retry"
        if kind == "strategic":
            return "requeue"
        self.failure_counts[task_id] = self.failure_counts.get(task_id, 0) + 1
        task = self.sim.graph.tasks[task_id]
        limit = task.max_retries if task.max_retries is not None else self.policy.max_retries
        return "retry" if self.failure_counts[task_id] <= limit else "final"

    # -------- checkpoints --------
    def _arm_checkpoint(self) -> None:
        every = self.policy.checkpoint_every_sec
        self._checkpoint_event = self.sim.at(EventKind.CHECKPOINT, self.sim.kernel.clock + every, self._periodic)

    def _periodic(self, event) -> None:
        self.checkpoints.append(self.snapshot())
        if self.sim.checkpoint_path:
            save_checkpoint(self.checkpoints[-1], self.sim.checkpoint_path)
        self._arm_checkpoint()

    def checkpoint(self) -> Checkpoint:
        """On-demand snapshot, recorded in the trace."""
        ckpt = self.snapshot()
        self.sim.kernel.emit(EventKind.CHECKPOINT, done=sum(1 for s in ckpt.task_states.values() if s == TaskState.DONE))
        self.checkpoints.append(ckpt)
        if self.sim.checkpoint_path:
            save_checkpoint(ckpt, self.sim.checkpoint_path)
        return ckpt

    def snapshot(self) -> Checkpoint:
        sim, graph = self.sim, self.sim.graph
        return Checkpoint(
            snapshot_time=sim.kernel.clock,
            seed=sim.seed,
            task_states={t: spec.state for t, spec in sorted(graph.tasks.items())},
            attempts=dict(sorted(sim.attempt_numbers.items())),
            failure_counts=dict(sorted(self.failure_counts.items())),
            tasks=[spec.model_copy() for _, spec in sorted(graph.tasks.items())],
            data=[ref for _, ref in sorted(graph.data.items())],
            templates=[
                TemplateRecord(template=c.template, instantiations=c.instantiations, closed=c.closed)
                for _, c in sorted(graph.templates.items())
            ],
            gfs_data=sorted(sim.data.directory.gfs),
            directory=sim.data.directory.snapshot(),
            provisioner_cursor=sim.provisioner.cursor,
            pending_flush=dict(sorted(sim.data.pending_flush.items())),
        )


def _describe(spec: FailureSpec) -> dict:
    out = {"kind": spec.kind, "persistence": spec.persistence}
    for key in ("node", "block", "task"):
        if getattr(spec, key) is not None:
            out[key] = getattr(spec, key)
    return out


# -------- recovery --------
def restore_graph(ckpt: Checkpoint) -> TaskGraph:
    """Rebuild the instantiated graph with the saved states; caches are cold, the IFS is gone."""
    graph = TaskGraph()
    for ref in ckpt.data:
        graph.add_data(ref)
    for spec in ckpt.tasks:
        graph.add_task(spec.model_copy(update={"state": TaskState.PENDING}))
    for record in ckpt.templates:
        graph.templates[record.template.id] = TemplateCursor(record.template, record.instantiations, record.closed)
        for k in range(1, record.instantiations + 1):
            graph._gathers[instance_id(record.template.id, k, record.template.gather)] = (record.template.id, k)
    states = {t: (s if s in (TaskState.DONE, TaskState.PRUNED, TaskState.FAILED) else TaskState.PENDING) for t, s in ckpt.task_states.items()}
    graph.restore(states)

    on_gfs = set(ckpt.gfs_data)
    changed = True
    while changed:
        changed = False
        for task_id in sorted(graph.tasks):
            spec = graph.tasks[task_id]
            if spec.state != TaskState.DONE:
                continue
            for out in spec.outputs:
                if out in on_gfs:
                    continue
                ref = graph.data[out]
                live_consumer = any(graph.tasks[c].state not in (TaskState.DONE, TaskState.PRUNED, TaskState.FAILED) for c in graph.consumers[out])
                if ref.kind == DataKind.OUTPUT or live_consumer:
                    graph.revert(task_id)
                    changed = True
                    break
    return graph


def recover(ckpt: Checkpoint, platform: PlatformSpec, policy: PolicyConfig, nodes: int, label: str = "", checkpoint_path=None):
    """Resume a checkpointed run on a static allocation of ``nodes``."""
    from src.agents.engine import Simulation

    graph = restore_graph(ckpt)
    fraction = ckpt.done_fraction
    failures = [
        f for f in policy.resilience.failures
        if not (f.at_sec is not None and f.at_sec < ckpt.snapshot_time)
        and not (f.at_fraction is not None and f.at_fraction <= fraction + 1e-9)
    ]
    resumed_policy = policy.model_copy(
        update={
            "provision": ProvisionPolicy(mode="static", static_nodes=nodes,
                                         grant_wait_sec=policy.provision.grant_wait_sec,
                                         request_overhead_sec=policy.provision.request_overhead_sec),
            "resilience": policy.resilience.model_copy(update={"failures": failures}),
        }
    )
    sim = Simulation(graph, platform, resumed_policy, seed=ckpt.seed, start_time=ckpt.snapshot_time, label=label, checkpoint_path=checkpoint_path)
    sim.attempt_numbers.update(ckpt.attempts)
    sim.resilience.failure_counts.update(ckpt.failure_counts)
    sim.provisioner.cursor = ckpt.provisioner_cursor
    for data_id in ckpt.gfs_data:
        if data_id in graph.data:
            sim.data.directory.mark_gfs(data_id)
    logger.info("recovering %d unfinished tasks on %d nodes from t=%.3f",
                sum(1 for s in graph.tasks.values() if s.state not in (TaskState.DONE, TaskState.PRUNED, TaskState.FAILED)),
                nodes, ckpt.snapshot_time)
    return sim
