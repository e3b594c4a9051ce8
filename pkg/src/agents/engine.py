"""The simulation engine.

Wires the kernel, machine, provisioner, dispatcher, data manager and resilience
layer into one deterministic run. Every state change happens inside an event
handler; after each handled event ``_pump`` re-evaluates dispatch and
provisioning until nothing more can happen at the current instant.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

from src.agents.data_manager import DataManager
from src.agents.dispatcher import Assignment, Dispatcher, chop_threshold
from src.agents.provisioner import Provisioner, release_idle, round_to_granularity
from src.agents.resilience import Checkpoint, Resilience
from src.core.errors import DestinationBusyError, MigrationError, SimulationInvariantError, UnknownTaskError
from src.core.kernel import EventKind, RngRegistry, SimEvent, SimKernel
from src.core.metrics import RunReport, build_report
from src.core.model import TERMINAL, DataKind, IterationResult, TaskGraph, TaskState
from src.core.platform import Flow, Machine, Network, NodeState, PlatformSpec, Route
from src.core.policies import PolicyConfig

logger = logging.getLogger(__name__)


@dataclass
class Attempt:
    """One execution attempt of a task.

    phase: sent -> (queued) -> staging -> computing -> (writing), with side exits
    pruning, suspended and migrating.
    """

    task: str
    number: int
    nodes: tuple[int, ...]
    scheduler: int
    ready_at: float
    phase: str = "sent"
    stage_from: float | None = None
    started_at: float | None = None
    remaining: float = 0.0
    resident: int = 0
    resumed: bool = False
    events: list[SimEvent] = field(default_factory=list)
    pinned: list[str] = field(default_factory=list)

    @property
    def node(self) -> int:
        return self.nodes[0]

    @property
    def started(self) -> bool:
        return self.phase in ("computing", "writing")


@dataclass
class SimResult:
    trace: list[SimEvent]
    report: RunReport
    counts: dict[str, int]
    halted: bool = False
    checkpoint: Checkpoint | None = None

    def trace_lines(self) -> list[str]:
        return [event.line() for event in self.trace]


class _Holders:
    """Mapping-like view of the location directory used for worker ranking."""

    def __init__(self, directory):
        self.directory = directory

    def get(self, data_id: str, default=()):
        return self.directory.holders(data_id) or default


class Simulation:
    def __init__(
        self,
        graph: TaskGraph,
        platform: PlatformSpec,
        policy: PolicyConfig,
        seed: int = 0,
        start_time: float = 0.0,
        label: str = "",
        checkpoint_path=None,
    ):
        self.graph = graph
        self.platform = platform
        self.policy = policy
        self.seed = seed
        self.label = label
        self.checkpoint_path = checkpoint_path

        self.kernel = SimKernel(start_time)
        self.rng = RngRegistry(seed)
        self.machine = Machine(platform)
        self.network = Network(platform)
        self.nodes: dict[int, NodeState] = {}
        self.idle: set[int] = set()
        self.provisioner = Provisioner(policy.provision, platform)
        self.dispatcher = Dispatcher(policy.dispatch, graph, self.rng.stream("placement"))
        self.data = DataManager(self)
        self.resilience = Resilience(self)

        self.attempts: dict[str, Attempt] = {}
        self.attempt_numbers: dict[str, int] = {}
        self.ready_since: dict[str, float] = {}
        self.outstanding: dict[int, tuple[list[int], SimEvent]] = {}
        self.suspended: list[str] = []
        self.done_count = sum(1 for t in graph.tasks.values() if t.state == TaskState.DONE)
        self.chop_fired = False
        self.started = False
        self.finished = False
        self.halted = False
        self.halt_checkpoint: Checkpoint | None = None

        self._callbacks: dict[int, Callable[[SimEvent], None]] = {}
        self._idle_checks: dict[int, SimEvent] = {}
        self._repairs: dict[int, SimEvent] = {}
        self._flows: dict[int, tuple[dict, Callable[[], None]]] = {}
        self._flow_ends: dict[int, SimEvent] = {}
        self._pumping = False
        for kind in EventKind:
            self.kernel.on(kind, self._handle)

    # -------- event plumbing --------
    def at(self, kind: EventKind, time: float, callback: Callable[[SimEvent], None], /, **payload) -> SimEvent:
        event = self.kernel.schedule(kind, time, **payload)
        self._callbacks[event.seq] = callback
        return event

    def cancel(self, event: SimEvent | None) -> None:
        if event is not None:
            self.kernel.cancel(event)
            self._callbacks.pop(event.seq, None)

    def _handle(self, event: SimEvent) -> None:
        callback = self._callbacks.pop(event.seq, None)
        if callback is not None:
            callback(event)
        self._pump()

    def transfer(self, data_id: str, size: int, route: Route, source, dest, on_done: Callable[[], None], extra: float = 0.0) -> None:
        """Move ``size`` bytes; zero-byte moves with no lookup cost complete synchronously.

        Route latency and ``extra`` (lookup cost) pass first; the bytes then flow at the
        route's fair share, which changes whenever a transfer joins or leaves the route.
        """
        if size == 0 and extra == 0:
            on_done()
            return
        payload = {"data": data_id, "route": route.value, "src": source, "dst": dest, "bytes": size}
        delay = self.network.latency(route) + extra
        if delay > 0:
            self.at(
                EventKind.TRANSFER_START,
                self.kernel.clock + delay,
                lambda event: self._open_flow(size, route, source, payload, on_done),
                **payload,
            )
        else:
            self.kernel.emit(EventKind.TRANSFER_START, **payload)
            self._open_flow(size, route, source, payload, on_done)

    def _open_flow(self, size: int, route: Route, source, payload: dict, on_done: Callable[[], None]) -> None:
        flow, rated = self.network.open(self.kernel.clock, size, route, source)
        self._flows[flow.id] = (payload, on_done)
        self._reschedule_flows(rated)

    def _reschedule_flows(self, flows: list[Flow]) -> None:
        now = self.kernel.clock
        for flow in flows:
            finish = max(now, flow.finish)
            event = self._flow_ends.get(flow.id)
            if event is not None and math.isclose(event.time, finish, rel_tol=1e-12, abs_tol=1e-9):
                continue
            self.cancel(event)
            payload, _ = self._flows[flow.id]
            self._flow_ends[flow.id] = self.at(EventKind.TRANSFER_END, finish, partial(self._flow_done, flow), **payload)

    def _flow_done(self, flow: Flow, event: SimEvent) -> None:
        del self._flow_ends[flow.id]
        _, on_done = self._flows.pop(flow.id)
        self._reschedule_flows(self.network.close(self.kernel.clock, flow))
        on_done()

    # -------- queries used by the data manager and resilience --------
    def node_usable(self, node_id) -> bool:
        node = self.nodes.get(node_id)
        return node is not None and node.alive

    def is_live(self, attempt: Attempt) -> bool:
        return self.attempts.get(attempt.task) is attempt and attempt.phase != "pruning"

    def check_complete(self) -> None:
        self._pump()

    # -------- run control --------
    def start(self) -> None:
        if self.started:
            return
        self.started = True
        for data_id, ref in self.graph.data.items():
            if ref.kind.is_input:
                self.data.directory.mark_gfs(data_id)
        self.resilience.arm()
        logger.debug("simulation %s starts with %d tasks at t=%.3f", self.label or self.seed, len(self.graph), self.kernel.clock)
        self._pump()

    def advance(self, until: float) -> int:
        """Process events up to ``until``; returns how many trace records were added."""
        self.start()
        if self.finished or self.halted:
            return 0
        return self.kernel.run(until)

    def run(self) -> SimResult:
        self.start()
        if not (self.finished or self.halted):
            self.kernel.run()
        if not (self.finished or self.halted):
            raise SimulationInvariantError(
                "deadlock",
                f"no events left with {self._unsettled()} unsettled tasks at t={self.kernel.clock:.3f}",
            )
        return self.result()

    def result(self) -> SimResult:
        states = self.graph.counts()
        counts = {
            "generated": len(self.graph),
            "done": states["done"],
            "pruned": states["pruned"],
            "failed": states["failed"],
        }
        report = build_report(
            self.kernel.trace,
            counts,
            seed=self.seed,
            start=self.kernel.start_time,
            cores_per_node=self.platform.cores_per_node,
            halted=self.halted,
            label=self.label,
        )
        return SimResult(self.kernel.trace, report, counts, self.halted, self.halt_checkpoint)

    def _unsettled(self) -> int:
        return sum(1 for t in self.graph.tasks.values() if t.state not in TERMINAL)

    # -------- the pump --------
    def _pump(self) -> None:
        if self._pumping or not self.started or self.finished or self.halted:
            return
        self._pumping = True
        try:
            self._enqueue_ready()
            if not self.attempts and self.dispatcher.ready_count() == 0 and self.graph.all_settled():
                self._finish()
                return
            self._assign()
            self._provision()
            self._schedule_idle_checks()
        finally:
            self._pumping = False

    def _enqueue_ready(self) -> None:
        now = self.kernel.clock
        for task_id in self.graph.take_newly_ready():
            if task_id in self.attempts or task_id in self.dispatcher:
                continue
            self.ready_since[task_id] = now
            self.dispatcher.enqueue(task_id)

    def _assign(self) -> None:
        now = self.kernel.clock
        self._resume_suspended()
        if len(self.dispatcher.gang_queue) and self.idle:
            by_grant: dict[int, list[int]] = {}
            for node in sorted(self.idle):
                grant = self.machine.allocated[self.machine.block_of(node)].grant_id
                by_grant.setdefault(grant, []).append(node)
            for assignment in self.dispatcher.gang_round(by_grant, now):
                self._dispatch(assignment)
        if self.policy.dispatch.mode == "pull":
            if self.idle and self.dispatcher.ready_count():
                locations = _Holders(self.data.directory) if self.policy.dispatch.data_aware else None
                for assignment in self.dispatcher.pull_round(sorted(self.idle), now, locations):
                    self._dispatch(assignment)
            return
        for sched in self.dispatcher.schedulers:
            for assignment in self.dispatcher.push_assign(sched, now):
                self._dispatch(assignment)
        for worker in sorted(self.idle):
            self._run_next(worker)

    # -------- provisioning --------
    def _provision(self) -> None:
        nodes = self.provisioner.next_request(
            ready_count=self.dispatcher.ready_count(),
            idle_nodes=len(self.idle),
            outstanding=len(self.outstanding),
            remaining=self.machine.free_nodes,
        )
        if nodes:
            self._request(nodes)

    def _request(self, nodes: int) -> None:
        grant_id, blocks = self.machine.reserve(nodes)
        p = self.policy.provision
        first = blocks[0]
        event = self.at(
            EventKind.BLOCK_GRANTED,
            self.kernel.clock + p.grant_wait_sec + p.request_overhead_sec,
            partial(self._granted, grant_id),
            block=first,
            grant=grant_id,
            nodes=list(self.machine.block_nodes[first]),
        )
        self.outstanding[grant_id] = (blocks, event)
        logger.debug("requested %d nodes as grant %d at t=%.3f", nodes, grant_id, self.kernel.clock)

    def _withdraw_request(self, grant_id: int) -> None:
        blocks, event = self.outstanding.pop(grant_id)
        self.cancel(event)
        self.machine.unreserve(blocks)

    def _granted(self, grant_id: int, event: SimEvent) -> None:
        blocks, _ = self.outstanding.pop(grant_id)
        now = self.kernel.clock
        new = []
        for i, block_id in enumerate(blocks):
            if i:
                self.kernel.emit(
                    EventKind.BLOCK_GRANTED, block=block_id, grant=grant_id, nodes=list(self.machine.block_nodes[block_id])
                )
            block = self.machine.grant(block_id, grant_id, now)
            for node_id in block.node_ids:
                self.nodes[node_id] = NodeState(node_id, block_id, self.platform.local_storage_bytes, idle_since=now)
                self.idle.add(node_id)
                self.dispatcher.add_worker(node_id)
                new.append(node_id)
        self.resilience.nodes_granted(new)
        if self.policy.data.common_input == "push-broadcast":
            self.data.broadcast_to(new)

    def _release_block(self, block_id: int) -> list[str]:
        """Give a block back; returns data items that no longer exist anywhere."""
        block = self.machine.release(block_id, self.kernel.clock)
        self.kernel.emit(EventKind.BLOCK_RELEASED, block=block_id, grant=block.grant_id, nodes=list(block.node_ids))
        lost = []
        for node_id in block.node_ids:
            node = self.nodes.get(node_id)
            if node is None:
                continue
            if node.busy in self.attempts:
                self._kill(self.attempts[node.busy], "strategic", "requeue")
            lost += self.data.erase_node(node_id)
            for task_id in self.dispatcher.remove_worker(node_id):
                self._kill(self.attempts[task_id], "strategic", "requeue")
            del self.nodes[node_id]
            self.idle.discard(node_id)
            self.cancel(self._idle_checks.pop(node_id, None))
            self.cancel(self._repairs.pop(node_id, None))
            self.resilience.node_gone(node_id)
        lost += self.data.erase_block_shards(block_id)
        return lost

    def _schedule_idle_checks(self) -> None:
        p = self.policy.provision
        if p.mode != "dynamic" or self.provisioner.frozen:
            return
        now = self.kernel.clock
        for node_id in sorted(self.idle):
            if node_id in self._idle_checks:
                continue
            since = self.nodes[node_id].idle_since
            self._idle_checks[node_id] = self.at(
                EventKind.WORKER_IDLE,
                max(now, since + p.idle_release_after_sec),
                partial(self._idle_check, node_id, since),
                node=node_id,
            )

    def _idle_stamp(self, node_id: int) -> float | None:
        node = self.nodes.get(node_id)
        if node is None or not node.alive:
            return float("-inf")
        return None if node.busy else node.idle_since

    def _idle_check(self, node_id: int, since: float, event: SimEvent) -> None:
        self._idle_checks.pop(node_id, None)
        node = self.nodes.get(node_id)
        if node is None or node.busy or node.idle_since != since:
            return
        blocks = {b: [self._idle_stamp(n) for n in self.machine.block_nodes[b]] for b in sorted(self.machine.allocated)}
        lost = []
        for block_id in release_idle(blocks, self.kernel.clock, self.policy.provision):
            lost += self._release_block(block_id)
        self._recover_lost(lost)

    # -------- node bookkeeping --------
    def _occupy(self, node_id: int, task_id: str) -> None:
        node = self.nodes[node_id]
        node.busy = task_id
        node.idle_since = None
        self.idle.discard(node_id)
        self.cancel(self._idle_checks.pop(node_id, None))

    def _vacate(self, node_id: int) -> None:
        node = self.nodes.get(node_id)
        if node is None:
            return
        node.busy = None
        if node.alive:
            node.idle_since = self.kernel.clock
            self.idle.add(node_id)

    # -------- dispatch --------
    def _dispatch(self, assignment: Assignment) -> None:
        task_id = assignment.task
        task = self.graph.tasks[task_id]
        number = self.attempt_numbers.get(task_id, 0) + 1
        self.attempt_numbers[task_id] = number
        self.graph.transition(task_id, TaskState.DISPATCHED)
        attempt = Attempt(
            task_id, number, assignment.nodes, assignment.scheduler,
            self.ready_since.get(task_id, self.kernel.clock), remaining=task.runtime,
        )
        self.attempts[task_id] = attempt
        pull = self.policy.dispatch.mode == "pull" or task.width > 1
        if pull:
            for node_id in assignment.nodes:
                self._occupy(node_id, task_id)
        if self.policy.dispatch.pipeline_grouping and task.group:
            self.dispatcher.dispatch_group(task.group, assignment.node)
        payload = {"task": task_id, "attempt": number, "node": assignment.node, "scheduler": assignment.scheduler, "ready_at": attempt.ready_at}
        if len(assignment.nodes) > 1:
            payload["nodes"] = list(assignment.nodes)
        attempt.events.append(self.at(EventKind.DISPATCH, assignment.arrive_at, partial(self._arrived, attempt, pull), **payload))

    def _arrived(self, attempt: Attempt, pull: bool, event: SimEvent) -> None:
        if not self.is_live(attempt):
            return
        if pull:
            self._begin(attempt)
            return
        worker = attempt.node
        if not self.node_usable(worker) or worker not in self.dispatcher.backlogs:
            self.dispatcher.inflight[worker] = max(0, self.dispatcher.inflight.get(worker, 1) - 1)
            self._requeue(attempt)
            return
        self.dispatcher.arrive(worker, attempt.task)
        attempt.phase = "queued"
        self._run_next(worker)

    def _run_next(self, worker: int) -> None:
        """Push mode: an idle worker starts the head of its backlog, or steals one."""
        if worker not in self.idle:
            return
        task_id = self.dispatcher.next_from_backlog(worker)
        if task_id is None and self.policy.dispatch.stealing:
            stolen = self.dispatcher.steal(worker)
            if stolen is not None:
                victim, task_id = stolen
                logger.debug("worker %d stole %s from %d", worker, task_id, victim)
        if task_id is None:
            return
        attempt = self.attempts[task_id]
        attempt.nodes = (worker,)
        self._occupy(worker, task_id)
        self._begin(attempt)

    def _begin(self, attempt: Attempt) -> None:
        attempt.phase = "staging"
        attempt.stage_from = self.kernel.clock
        self.data.stage_in(attempt, partial(self._start, attempt))

    def _payload(self, attempt: Attempt) -> dict:
        payload = {"task": attempt.task, "attempt": attempt.number, "node": attempt.node}
        if len(attempt.nodes) > 1:
            payload["nodes"] = list(attempt.nodes)
        return payload

    def _start(self, attempt: Attempt) -> None:
        if not self.is_live(attempt):
            return
        now = self.kernel.clock
        attempt.phase = "computing"
        attempt.started_at = now
        self.graph.transition(attempt.task, TaskState.RUNNING)
        payload = self._payload(attempt)
        if self.policy.data.output == "synchronized" and attempt.stage_from is not None and now > attempt.stage_from:
            payload["busy_from"] = attempt.stage_from
        self.kernel.emit(EventKind.TASK_START, **payload)
        self._arm_compute(attempt)

    def _arm_compute(self, attempt: Attempt) -> None:
        now = self.kernel.clock
        finish_at = now + attempt.remaining
        deadline = None if attempt.resumed else self.resilience.attempt_deadline(attempt.task, now)
        if deadline is not None and deadline[0] < finish_at:
            at, cause = deadline
            attempt.events.append(
                self.at(EventKind.TASK_FAIL, at, partial(self._deadline_hit, attempt), cause=cause, **self._payload(attempt))
            )
            return
        if self.data.needs_write_phase(attempt.task):
            attempt.events.append(self.at(EventKind.TASK_COMPUTED, finish_at, partial(self._computed, attempt), **self._payload(attempt)))
        else:
            attempt.events.append(self.at(EventKind.TASK_END, finish_at, partial(self._ended, attempt), **self._payload(attempt)))

    def _deadline_hit(self, attempt: Attempt, event: SimEvent) -> None:
        self.fail_attempt(attempt, "application", event)

    def _computed(self, attempt: Attempt, event: SimEvent) -> None:
        if not self.is_live(attempt):
            return
        attempt.phase = "writing"
        self.data.write_outputs(attempt, partial(self._written, attempt))

    def _written(self, attempt: Attempt) -> None:
        if not self.is_live(attempt):
            return
        self.kernel.emit(EventKind.TASK_END, **self._payload(attempt))
        self._settle(attempt)

    def _ended(self, attempt: Attempt, event: SimEvent) -> None:
        if not self.is_live(attempt):
            return
        attempt.phase = "writing"
        self.data.write_outputs(attempt, partial(self._settle, attempt))

    # -------- completion --------
    def _settle(self, attempt: Attempt) -> None:
        if not self.is_live(attempt):
            return
        task_id, node_id = attempt.task, attempt.node
        for event in attempt.events:
            self.cancel(event)
        node = self.nodes.get(node_id)
        if node is not None:
            for data_id in attempt.pinned:
                node.unpin(data_id)
        del self.attempts[task_id]
        newly = self.graph.mark_done(task_id)
        self.done_count += 1
        successor = self._group_successor(task_id, node_id, newly)
        for n in attempt.nodes:
            if successor is None or n != node_id:
                self._vacate(n)

        self._after_completion(task_id)
        if successor is None:
            return
        if (
            not (self.halted or self.finished)
            and self.node_usable(node_id)
            and self.nodes[node_id].busy == task_id
            and self.graph.state(successor) == TaskState.READY
        ):
            self._handoff(successor, node_id)
        elif self.nodes.get(node_id) is not None and self.nodes[node_id].busy == task_id:
            self._vacate(node_id)

    def _group_successor(self, task_id: str, node_id: int, newly: list[str]) -> str | None:
        group = self.graph.tasks[task_id].group
        if not (self.policy.dispatch.pipeline_grouping and group):
            return None
        for succ in newly:
            if self.graph.tasks[succ].group == group and self.dispatcher.bound_node(succ) == node_id:
                return succ
        return None

    def _handoff(self, task_id: str, node_id: int) -> None:
        """Start the next stage of a pipeline group on the node that produced its input."""
        now = self.kernel.clock
        number = self.attempt_numbers.get(task_id, 0) + 1
        self.attempt_numbers[task_id] = number
        self.graph.transition(task_id, TaskState.DISPATCHED)
        sched = self.dispatcher.scheduler_of(node_id).id
        attempt = Attempt(task_id, number, (node_id,), sched, now, remaining=self.graph.tasks[task_id].runtime)
        self.attempts[task_id] = attempt
        self.nodes[node_id].busy = task_id
        self.kernel.emit(EventKind.DISPATCH, task=task_id, attempt=number, node=node_id, scheduler=sched, ready_at=now, handoff=1)
        self._begin(attempt)

    def _after_completion(self, task_id: str) -> None:
        self.resilience.on_completion(self.done_count, len(self.graph))
        if self.halted or self.finished:
            return
        self._maybe_prune(task_id)
        self._maybe_unfold(task_id)
        self._maybe_chop()

    def _maybe_prune(self, task_id: str) -> None:
        spec = self.graph.tasks[task_id]
        if spec.prune <= 0:
            return
        siblings = self.graph.siblings(task_id)
        if not siblings or self.rng.stream("pruning").random() >= spec.prune:
            return
        for sib in siblings:
            state = self.graph.state(sib)
            if state == TaskState.DONE:
                for child in self.graph.children(sib):
                    if self.graph.state(child) not in TERMINAL:
                        self.prune(child)
            elif state not in TERMINAL:
                self.prune(sib)

    def _maybe_unfold(self, task_id: str) -> None:
        found = self.graph.gather_of(task_id)
        if found is None:
            return
        template_id, k = found
        cursor = self.graph.templates[template_id]
        if cursor.closed:
            return
        tpl = cursor.template
        converged = bool(tpl.converge_at and k >= tpl.converge_at)
        if not converged and tpl.converge_probability > 0:
            converged = self.rng.stream("iteration").random() < tpl.converge_probability
        new = self.graph.unfold_iteration(template_id, IterationResult(k, converged))
        logger.debug("template %s iteration %d: converged=%s, %d new tasks", template_id, k, converged, len(new))

    def _close_template_of(self, task_id: str) -> None:
        found = self.graph.gather_of(task_id)
        if found is not None:
            self.graph.templates[found[0]].closed = True

    def _maybe_chop(self) -> None:
        chop = self.policy.dispatch.chop
        if chop is None or self.chop_fired:
            return
        total = len(self.graph)
        if self.done_count >= chop_threshold(total, chop.trigger_fraction) and self.done_count < total:
            self.chop_tail()

    # -------- pruning --------
    def prune(self, root: str) -> set[str]:
        """Prune ``root`` and its exclusive descendants, signalling any that are running."""
        gone = self.graph.prune_tasks(root)
        for task_id in sorted(gone):
            self._withdraw(task_id)
            self._close_template_of(task_id)
        return gone

    def _withdraw(self, task_id: str) -> None:
        if task_id in self.dispatcher:
            self.dispatcher.remove(task_id)
        attempt = self.attempts.get(task_id)
        if attempt is None:
            return
        if not attempt.started:
            self._drop_attempt(attempt)
            return
        for event in attempt.events:
            self.cancel(event)
        attempt.events.clear()
        attempt.phase = "pruning"
        attempt.events.append(
            self.at(
                EventKind.PRUNE_SIGNAL,
                self.kernel.clock + self.policy.dispatch.dispatch_latency_sec,
                partial(self._pruned, attempt),
                **self._payload(attempt),
            )
        )

    def _pruned(self, attempt: Attempt, event: SimEvent) -> None:
        if self.attempts.get(attempt.task) is attempt:
            attempt.events.clear()
            self._drop_attempt(attempt)

    # -------- failure paths --------
    def _drop_attempt(self, attempt: Attempt) -> None:
        for event in attempt.events:
            self.cancel(event)
        attempt.events.clear()
        if self.policy.dispatch.mode == "push" and self.graph.tasks[attempt.task].width == 1:
            if attempt.phase == "sent":
                worker = attempt.node
                if self.dispatcher.inflight.get(worker, 0) > 0:
                    self.dispatcher.inflight[worker] -= 1
            elif attempt.phase == "queued":
                self.dispatcher.remove(attempt.task)
        node = self.nodes.get(attempt.node)
        if node is not None and attempt.phase not in ("suspended", "migrating"):
            for data_id in attempt.pinned:
                node.unpin(data_id)
        for node_id in attempt.nodes:
            node = self.nodes.get(node_id)
            if node is not None and node.busy == attempt.task:
                self._vacate(node_id)
        if attempt.task in self.suspended:
            self.suspended.remove(attempt.task)
        del self.attempts[attempt.task]

    def _kill(self, attempt: Attempt, cause: str, outcome: str) -> None:
        """Stop an attempt from outside (chop, halt, node loss) and put the task back."""
        if attempt.phase == "pruning":
            self.kernel.emit(EventKind.PRUNE_SIGNAL, **self._payload(attempt))
            self._drop_attempt(attempt)
            return
        if attempt.started:
            self.kernel.emit(EventKind.TASK_FAIL, cause=cause, outcome=outcome, **self._payload(attempt))
        self._drop_attempt(attempt)
        if self.graph.state(attempt.task) not in TERMINAL:
            self.graph.reset(attempt.task)

    def _requeue(self, attempt: Attempt) -> None:
        self._drop_attempt(attempt)
        if self.graph.state(attempt.task) not in TERMINAL:
            self.graph.reset(attempt.task)

    def fail_attempt(self, attempt: Attempt, kind: str, event: SimEvent | None = None) -> str | None:
        """An attempt failed: retry it or, once retries are exhausted, fail it for good."""
        if self.attempts.get(attempt.task) is not attempt:
            return None
        if attempt.phase == "pruning" or not attempt.started:
            self._kill(attempt, kind, "retry")
            return "retry"
        outcome = self.resilience.on_failure(attempt.task, kind)
        if event is None:
            self.kernel.emit(EventKind.TASK_FAIL, cause=kind, outcome=outcome, **self._payload(attempt))
        else:
            event.payload["outcome"] = outcome
            attempt.events = [e for e in attempt.events if e is not event]
        self._drop_attempt(attempt)
        self.graph.transition(attempt.task, TaskState.FAILED)
        if outcome == "final":
            logger.info("task %s failed permanently after %d attempts", attempt.task, attempt.number)
            self._close_template_of(attempt.task)
            for child in self.graph.children(attempt.task):
                if self.graph.state(child) not in TERMINAL:
                    self.prune(child)
        else:
            self.graph.reset(attempt.task)
        return outcome

    def fail_node(self, node_id: int, kind: str, permanent: bool) -> None:
        """Hardware/OS fault: the node's task fails, its storage is wiped, and it leaves
        the pool for good or until it reboots."""
        node = self.nodes.get(node_id)
        if node is None or not node.alive:
            return
        node.alive = False
        self.idle.discard(node_id)
        self.cancel(self._idle_checks.pop(node_id, None))
        if node.busy in self.attempts:
            self.fail_attempt(self.attempts[node.busy], kind)
        lost = self.data.erase_node(node_id)
        for task_id in self.dispatcher.remove_worker(node_id):
            self._kill(self.attempts[task_id], kind, "retry")
        self.resilience.node_gone(node_id)
        if not permanent:
            self._repairs[node_id] = self.at(
                EventKind.NODE_REPAIRED,
                self.kernel.clock + self.policy.resilience.reboot_delay_sec,
                partial(self._repaired, node_id),
                node=node_id,
            )
        self._recover_lost(lost)

    def _repaired(self, node_id: int, event: SimEvent) -> None:
        self._repairs.pop(node_id, None)
        node = self.nodes.get(node_id)
        if node is None:
            return
        node.alive = True
        self._vacate(node_id)
        self.dispatcher.add_worker(node_id)
        self.resilience.node_back(node_id)

    def _recover_lost(self, items: list[str]) -> None:
        """Re-run the producers of lost items that are still needed."""
        for data_id in sorted(set(items)):
            producer = self.graph.producer.get(data_id)
            if producer is None or self.graph.state(producer) != TaskState.DONE:
                continue
            if self.data.directory.holders(data_id) or self.data.directory.durable(data_id):
                continue
            ref = self.graph.data[data_id]
            waiting = any(
                self.graph.state(c) in (TaskState.PENDING, TaskState.READY, TaskState.DISPATCHED)
                for c in self.graph.consumers[data_id]
            )
            if ref.kind != DataKind.OUTPUT and not waiting:
                continue
            for consumer in self.graph.revert(producer):
                self.dispatcher.remove(consumer)
            self.done_count -= 1
            logger.debug("%s lost; %s will run again", data_id, producer)

    def on_evicted(self, data_id: str) -> None:
        self._recover_lost([data_id])

    def abort_attempt(self, attempt: Attempt, data_id: str) -> None:
        """Stage-in found an input gone; retry once it is available again."""
        self._requeue(attempt)
        self._recover_lost([data_id])

    # -------- tail chopping and migration --------
    def chop_tail(self) -> dict | None:
        """Kill (or suspend for migration) the running tail, release the whole allocation
        and restart the survivors on the smaller restart allocation. Fires at most once."""
        chop = self.policy.dispatch.chop
        if chop is None or self.chop_fired or self.finished or self.halted:
            return None
        self.chop_fired = True
        self.kernel.emit(EventKind.CHOP_TRIGGERED, done=self.done_count, total=len(self.graph), restart=chop.restart_nodes)
        killed, moved = [], []
        for task_id in sorted(self.attempts):
            attempt = self.attempts.get(task_id)
            if attempt is None:
                continue
            if self.policy.dispatch.migration and attempt.phase == "computing" and len(attempt.nodes) == 1:
                self._suspend(attempt)
                moved.append(task_id)
            else:
                self._kill(attempt, "strategic", "requeue")
                killed.append(task_id)
        for grant_id in sorted(self.outstanding):
            self._withdraw_request(grant_id)
        lost = []
        for block_id in sorted(self.machine.allocated):
            lost += self._release_block(block_id)
        self._recover_lost(lost)
        nodes = round_to_granularity(chop.restart_nodes, self.platform.block_granularity, self.platform.node_count)
        self.provisioner.freeze()
        self._request(nodes)
        logger.info("tail chopped at t=%.3f: %d killed, %d migrating, restarting on %d nodes", self.kernel.clock, len(killed), len(moved), nodes)
        return {"killed": killed, "migrated": moved, "restart_nodes": nodes}

    def _suspend(self, attempt: Attempt, to: int | None = None) -> None:
        now = self.kernel.clock
        attempt.remaining -= now - attempt.started_at
        for event in attempt.events:
            self.cancel(event)
        attempt.events.clear()
        payload = {"task": attempt.task, "attempt": attempt.number, "from": attempt.node,
                   "progress": self.graph.tasks[attempt.task].runtime - attempt.remaining}
        if to is not None:
            payload["to"] = to
        self.kernel.emit(EventKind.MIGRATE, **payload)
        attempt.resident = sum(self.graph.data[d].size for d in attempt.pinned)
        node = self.nodes.get(attempt.node)
        if node is not None:
            for data_id in attempt.pinned:
                node.unpin(data_id)
            if node.busy == attempt.task:
                self._vacate(attempt.node)
        attempt.phase = "suspended"
        self.suspended.append(attempt.task)

    def migrate(self, task_id: str, to_node: int) -> None:
        """Move a running (or suspended) task to ``to_node`` keeping its progress."""
        if not self.policy.dispatch.migration:
            raise MigrationError("task migration is disabled by policy")
        attempt = self.attempts.get(task_id)
        if attempt is None:
            if task_id not in self.graph.tasks:
                raise UnknownTaskError(f"unknown task {task_id}")
            raise MigrationError(f"{task_id} is not running")
        if attempt.phase not in ("computing", "suspended"):
            raise MigrationError(f"{task_id} is not running ({attempt.phase})")
        target = self.nodes.get(to_node)
        if target is None or not target.alive or target.busy is not None:
            raise DestinationBusyError(f"node {to_node} cannot take {task_id}")
        if attempt.phase == "computing":
            self._suspend(attempt, to=to_node)
        self.suspended.remove(task_id)
        self._occupy(to_node, task_id)
        attempt.nodes = (to_node,)
        attempt.resumed = True
        attempt.phase = "migrating"
        delay = attempt.resident / self.platform.node_link_bandwidth_bytes_per_sec
        attempt.events.append(
            self.at(
                EventKind.TASK_START,
                self.kernel.clock + delay,
                partial(self._resumed, attempt),
                task=task_id, attempt=attempt.number, node=to_node, resume=1,
            )
        )

    def _resumed(self, attempt: Attempt, event: SimEvent) -> None:
        if self.attempts.get(attempt.task) is not attempt:
            return
        attempt.events = [e for e in attempt.events if e is not event]
        self.data.adopt(attempt.node, attempt.pinned)
        attempt.phase = "computing"
        attempt.started_at = self.kernel.clock
        self._arm_compute(attempt)

    def _resume_suspended(self) -> None:
        while self.suspended and self.idle:
            self.migrate(self.suspended[0], min(self.idle))

    # -------- halting and finishing --------
    def checkpoint(self) -> Checkpoint:
        return self.resilience.checkpoint()

    def halt(self) -> Checkpoint | None:
        """Checkpoint, stop every attempt and give the allocation back."""
        if self.halted or self.finished:
            return None
        self.halt_checkpoint = self.resilience.checkpoint()
        for task_id in sorted(self.attempts):
            attempt = self.attempts.get(task_id)
            if attempt is not None:
                self._kill(attempt, "strategic", "halt")
        self._shutdown()
        self.halted = True
        logger.info("run halted at t=%.3f with %d tasks done", self.kernel.clock, self.done_count)
        return self.halt_checkpoint

    def _finish(self) -> None:
        if self.data.final_flush():
            return
        self._shutdown()
        self._check_durability()
        self.finished = True

    def _shutdown(self) -> None:
        self.resilience.disarm()
        self.cancel(self.data.flush_event)
        self.data.flush_event = None
        for node_id in sorted(self._idle_checks):
            self.cancel(self._idle_checks[node_id])
        self._idle_checks.clear()
        for grant_id in sorted(self.outstanding):
            self._withdraw_request(grant_id)
        for block_id in sorted(self.machine.allocated):
            self._release_block(block_id)
        self.kernel.stop()

    def _check_durability(self) -> None:
        for data_id, ref in sorted(self.graph.data.items()):
            if ref.kind != DataKind.OUTPUT:
                continue
            producer = self.graph.producer.get(data_id)
            if producer and self.graph.state(producer) == TaskState.DONE and data_id not in self.data.directory.gfs:
                raise SimulationInvariantError("output-durability", f"{data_id} never reached the global file system")

    # -------- runtime adjustments --------
    def set_priority(self, task_id: str, priority: float) -> None:
        self.graph.set_priority(task_id, priority)
        self.dispatcher.reprioritize(task_id)
