"""Task scheduling and load balancing across the submit host, schedulers and workers.

The dispatcher owns queues and placement decisions only; the engine turns the
returned ``Assignment`` records into timed dispatch events.
"""

import heapq
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field

from src.core.kernel import RngStream
from src.core.model import DataRef, TaskGraph, TaskSpec
from src.core.policies import DispatchPolicy

logger = logging.getLogger(__name__)


def order_key(ordering: str, runtimes_known: bool):
    """Sort key factory for a scheduler queue; ties always fall back to the smallest id."""

    def key(task: TaskSpec, seq: int) -> tuple:
        if ordering == "fifo":
            return (seq, task.id)
        if ordering == "priority":
            return (-task.priority, task.id)
        known = task.runtime if runtimes_known else task.estimate
        if known is None:
            # unestimated work falls back to FIFO behind the estimated tasks
            return (1, 0.0, seq, task.id)
        return (0, -known if ordering == "longest-first" else known, 0, task.id)

    return key


class TaskQueue:
    """Heap with lazy invalidation, so removal and re-prioritization are cheap."""

    def __init__(self, graph: TaskGraph, key):
        self.graph = graph
        self.key = key
        self._heap: list[list] = []
        self._entries: dict[str, list] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, task_id: str) -> bool:
        return task_id in self._entries

    def push(self, task_id: str, seq: int) -> None:
        if task_id in self._entries:
            self.remove(task_id)
        entry = [self.key(self.graph.tasks[task_id], seq), seq, task_id, True]
        self._entries[task_id] = entry
        heapq.heappush(self._heap, entry)

    def remove(self, task_id: str) -> bool:
        entry = self._entries.pop(task_id, None)
        if entry is None:
            return False
        entry[3] = False
        return True

    def reprioritize(self, task_id: str) -> None:
        entry = self._entries.get(task_id)
        if entry is not None:
            self.push(task_id, entry[1])

    def pop(self) -> str | None:
        while self._heap:
            entry = heapq.heappop(self._heap)
            if entry[3]:
                del self._entries[entry[2]]
                return entry[2]
        return None

    def ordered(self) -> list[str]:
        live = sorted((e for e in self._heap if e[3]), key=lambda e: (e[0], e[1]))
        return [e[2] for e in live]

    def seq_of(self, task_id: str) -> int:
        return self._entries[task_id][1]


@dataclass
class SchedulerState:
    id: int
    queue: TaskQueue
    workers: set[int] = field(default_factory=set)
    next_free: float = 0.0
    rr_cursor: int = 0


@dataclass
class Assignment:
    task: str
    nodes: tuple[int, ...]
    scheduler: int
    dispatch_at: float
    arrive_at: float

    @property
    def node(self) -> int:
        return self.nodes[0]


def rank_workers(inputs: list[DataRef], candidates: list[int], locations: dict[str, set[int]]) -> list[int]:
    """Candidates by descending resident input bytes, ties by node id."""
    resident = {n: 0 for n in candidates}
    for ref in inputs:
        for node in locations.get(ref.id, ()):
            if node in resident:
                resident[node] += ref.size
    return sorted(candidates, key=lambda n: (-resident[n], n))


def chop_threshold(total: int, trigger_fraction: float) -> int:
    """Completions needed before the tail is chopped."""
    return max(1, math.floor(trigger_fraction * total + 1e-9))


class Dispatcher:
    def __init__(self, policy: DispatchPolicy, graph: TaskGraph, placement: RngStream):
        self.policy = policy
        self.graph = graph
        self.placement = placement
        key = order_key(policy.ordering, policy.runtimes_known)
        self.schedulers = [SchedulerState(i, TaskQueue(graph, key)) for i in range(policy.schedulers)]
        self.gang_queue = TaskQueue(graph, key)
        self.backlogs: dict[int, deque] = {}
        self.inflight: dict[int, int] = {}
        self.bound: dict[str, int] = {}
        self._seq = itertools.count()
        self._where: dict[str, TaskQueue] = {}

    # -------- workers --------
    def scheduler_of(self, node: int) -> SchedulerState:
        return self.schedulers[node % len(self.schedulers)]

    def add_worker(self, node: int) -> None:
        self.scheduler_of(node).workers.add(node)
        self.backlogs.setdefault(node, deque())
        self.inflight.setdefault(node, 0)
        self.rebalance()

    def remove_worker(self, node: int) -> list[str]:
        """Forget a worker; returns tasks stranded in its backlog."""
        self.scheduler_of(node).workers.discard(node)
        stranded = list(self.backlogs.pop(node, ()))
        self.inflight.pop(node, None)
        self.rebalance()
        return stranded

    def live_workers(self) -> list[int]:
        return sorted(w for s in self.schedulers for w in s.workers)

    def rebalance(self) -> None:
        """Move tasks off schedulers that have no workers left."""
        live = [s for s in self.schedulers if s.workers]
        if not live:
            return
        for sched in self.schedulers:
            if sched.workers or not len(sched.queue):
                continue
            for task_id in sched.queue.ordered():
                seq = sched.queue.seq_of(task_id)
                sched.queue.remove(task_id)
                target = min(live, key=lambda s: (len(s.queue), s.id))
                target.queue.push(task_id, seq)
                self._where[task_id] = target.queue

    # -------- queues --------
    def enqueue(self, task_id: str) -> None:
        """Submit host routes a ready task to the least-loaded scheduler (gangs to the central queue)."""
        seq = next(self._seq)
        if self.graph.tasks[task_id].width > 1:
            queue = self.gang_queue
        else:
            live = [s for s in self.schedulers if s.workers] or self.schedulers
            queue = min(live, key=lambda s: (len(s.queue), s.id)).queue
        queue.push(task_id, seq)
        self._where[task_id] = queue

    def remove(self, task_id: str) -> bool:
        queue = self._where.pop(task_id, None)
        if queue is not None and queue.remove(task_id):
            return True
        for node, backlog in self.backlogs.items():
            if task_id in backlog:
                backlog.remove(task_id)
                return True
        return False

    def __contains__(self, task_id: str) -> bool:
        return task_id in self._where

    def reprioritize(self, task_id: str) -> None:
        queue = self._where.get(task_id)
        if queue is not None:
            queue.reprioritize(task_id)

    def ready_count(self) -> int:
        return sum(len(s.queue) for s in self.schedulers) + len(self.gang_queue)

    def queued(self) -> list[str]:
        return sorted(self._where)

    def _pop(self, queue: TaskQueue) -> str | None:
        task_id = queue.pop()
        if task_id is not None:
            self._where.pop(task_id, None)
        return task_id

    # -------- timing --------
    def _timed(self, task_id: str, nodes: tuple[int, ...], sched: SchedulerState, now: float, extra: float = 0.0) -> Assignment:
        p = self.policy
        dispatch_at = max(now, sched.next_free) + extra
        if p.dispatch_throughput_per_sec:
            sched.next_free = dispatch_at + 1.0 / p.dispatch_throughput_per_sec
        arrive_at = dispatch_at + p.hops * p.dispatch_latency_sec
        return Assignment(task_id, nodes, sched.id, dispatch_at, arrive_at)

    # -------- pull --------
    def assign_on_idle(self, worker: int, now: float) -> Assignment | None:
        """Head of the worker's scheduler queue goes to that worker."""
        sched = self.scheduler_of(worker)
        task_id = self._pop(sched.queue)
        if task_id is None:
            return None
        return self._timed(task_id, (worker,), sched, now)

    def pull_round(self, idle: list[int], now: float, locations: dict[str, set[int]] | None = None) -> list[Assignment]:
        """Match queued tasks to idle workers, scheduler by scheduler."""
        out = []
        for sched in self.schedulers:
            candidates = sorted(w for w in idle if w in sched.workers)
            while candidates and len(sched.queue):
                if not (self.policy.data_aware or self.policy.random_placement):
                    out.append(self.assign_on_idle(candidates.pop(0), now))
                    continue
                task_id = self._pop(sched.queue)
                extra = 0.0
                if self.policy.data_aware:
                    ranked = rank_workers(self.graph.inputs_of(task_id), candidates, locations or {})
                    node = ranked[0]
                    extra = self.policy.lookup_latency_sec
                else:
                    node = self.placement.choice(candidates)
                candidates.remove(node)
                out.append(self._timed(task_id, (node,), sched, now, extra))
        return out

    # -------- gangs --------
    def gang_round(self, idle_by_grant: dict[int, list[int]], now: float) -> list[Assignment]:
        """Place multi-node tasks atomically on idle nodes of a single allocation."""
        out = []
        pools = {g: sorted(nodes) for g, nodes in sorted(idle_by_grant.items())}
        for task_id in self.gang_queue.ordered():
            width = self.graph.tasks[task_id].width
            for grant, pool in pools.items():
                if len(pool) >= width:
                    nodes, pools[grant] = tuple(pool[:width]), pool[width:]
                    self.gang_queue.remove(task_id)
                    self._where.pop(task_id, None)
                    out.append(self._timed(task_id, nodes, self.schedulers[0], now))
                    break
        return out

    # -------- push --------
    def backlog_len(self, worker: int) -> int:
        return len(self.backlogs.get(worker, ())) + self.inflight.get(worker, 0)

    def push_assign(self, sched: SchedulerState, now: float) -> list[Assignment]:
        """Round-robin queued tasks onto workers with backlog room, busy or not."""
        out = []
        workers = sorted(sched.workers)
        if not workers:
            return out
        limit = self.policy.backlog_limit
        while len(sched.queue):
            for step in range(len(workers)):
                worker = workers[(sched.rr_cursor + step) % len(workers)]
                if self.backlog_len(worker) < limit:
                    break
            else:
                break
            sched.rr_cursor = (workers.index(worker) + 1) % len(workers)
            task_id = self._pop(sched.queue)
            self.inflight[worker] += 1
            out.append(self._timed(task_id, (worker,), sched, now))
        return out

    def arrive(self, worker: int, task_id: str) -> None:
        self.inflight[worker] -= 1
        self.backlogs[worker].append(task_id)

    def next_from_backlog(self, worker: int) -> str | None:
        backlog = self.backlogs.get(worker)
        return backlog.popleft() if backlog else None

    def steal(self, worker: int) -> tuple[int, str] | None:
        """Poll neighbours in seeded order and take the tail of the first non-empty backlog."""
        others = [w for w in self.live_workers() if w != worker]
        if not others:
            return None
        for victim in self.placement.permutation(others)[: self.policy.neighbor_count]:
            backlog = self.backlogs.get(victim)
            if backlog:
                return victim, backlog.pop()
        return None

    # -------- pipeline groups --------
    def dispatch_group(self, group: str, node: int) -> dict[str, int]:
        """Bind every member of a chain-shaped group to ``node``."""
        members = self.graph.group_chain(group)
        self.bound[group] = node
        return {task_id: node for task_id in members}

    def bound_node(self, task_id: str) -> int | None:
        group = self.graph.tasks[task_id].group
        if not (self.policy.pipeline_grouping and group):
            return None
        return self.bound.get(group)
