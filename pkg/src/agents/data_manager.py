"""Data movement and placement: location directories, multicast/reduction trees,
stage-in, output writes and collective flushing."""

import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

from src.core.errors import LocalStorageFullError, SimulationInvariantError, UnknownDataError
from src.core.kernel import EventKind
from src.core.model import DataKind, DataRef
from src.core.platform import Route
from src.core.policies import DataPolicy
from src.core.utils import stable_hash

logger = logging.getLogger(__name__)

KNUTH = 2654435761
UTILITY_ROOT = "u0"


# -------- Location directories --------
@dataclass
class Location:
    nodes: set[int]
    on_gfs: bool
    on_ifs: bool
    cost: float


class LocationDirectory:
    """Central map from data id to the nodes caching it, plus GFS and IFS residency."""

    def __init__(self, lookup_cost: float = 0.0):
        self.lookup_cost = lookup_cost
        self.replicas: dict[str, set[int]] = {}
        self.by_node: dict[int, set[str]] = {}
        self.gfs: set[str] = set()
        self.ifs: dict[str, int] = {}

    def _shard(self, data_id: str) -> dict[str, set[int]]:
        return self.replicas

    def _probe(self, data_id: str) -> dict[str, set[int]]:
        return self._shard(data_id)

    def register(self, data_id: str, node: int) -> None:
        self._shard(data_id).setdefault(data_id, set()).add(node)
        self.by_node.setdefault(node, set()).add(data_id)

    def deregister(self, data_id: str, node: int) -> None:
        holders = self._shard(data_id).get(data_id)
        if holders is not None:
            holders.discard(node)
            if not holders:
                del self._shard(data_id)[data_id]
        self.by_node.get(node, set()).discard(data_id)

    def drop_node(self, node: int) -> list[str]:
        items = sorted(self.by_node.pop(node, set()))
        for data_id in items:
            holders = self._shard(data_id).get(data_id)
            if holders is not None:
                holders.discard(node)
                if not holders:
                    del self._shard(data_id)[data_id]
        return items

    def mark_gfs(self, data_id: str) -> None:
        self.gfs.add(data_id)

    def mark_ifs(self, data_id: str, block: int) -> None:
        self.ifs[data_id] = block

    def drop_ifs_block(self, block: int) -> list[str]:
        lost = sorted(d for d, b in self.ifs.items() if b == block)
        for data_id in lost:
            del self.ifs[data_id]
        return lost

    def holders(self, data_id: str) -> set[int]:
        return set(self._shard(data_id).get(data_id, ()))

    def durable(self, data_id: str) -> bool:
        return data_id in self.gfs or data_id in self.ifs

    def locate(self, data_id: str) -> Location:
        nodes = set(self._probe(data_id).get(data_id, ()))
        on_gfs, on_ifs = data_id in self.gfs, data_id in self.ifs
        if not (nodes or on_gfs or on_ifs):
            raise UnknownDataError(f"no replica of {data_id} anywhere")
        return Location(nodes, on_gfs, on_ifs, self.lookup_cost)

    def snapshot(self) -> dict[str, list[int]]:
        out = {}
        for node, items in self.by_node.items():
            for data_id in items:
                out.setdefault(data_id, []).append(node)
        return {k: sorted(v) for k, v in sorted(out.items())}


class HashedDirectory(LocationDirectory):
    """Replica sets sharded over ``server_count`` servers; any id resolves with one probe."""

    def __init__(self, server_count: int, probe_cost: float = 0.0):
        super().__init__(probe_cost)
        self.servers: list[dict[str, set[int]]] = [{} for _ in range(server_count)]
        self.probes = 0

    def server_for(self, data_id: str) -> int:
        return ((stable_hash(data_id) * KNUTH) % 2**32) % len(self.servers)

    def _shard(self, data_id: str) -> dict[str, set[int]]:
        return self.servers[self.server_for(data_id)]

    def _probe(self, data_id: str) -> dict[str, set[int]]:
        self.probes += 1
        return self._shard(data_id)


def make_directory(policy: DataPolicy) -> LocationDirectory:
    if policy.location == "hashed":
        return HashedDirectory(policy.server_count, policy.probe_latency_sec)
    return LocationDirectory(policy.central_lookup_sec)


# -------- Collective plans --------
@dataclass
class BroadcastPlan:
    root: object
    edges: list[tuple[object, int, int]]
    depth: int

    def children(self, node) -> list[int]:
        return [child for parent, child, _ in self.edges if parent == node]


def plan_broadcast(source, destinations: list[int], fanout: int) -> BroadcastPlan:
    """Balanced tree over the destinations, filled level by level, out-degree <= fanout."""
    dests = sorted(set(destinations))
    if not dests:
        return BroadcastPlan(source, [], 0)
    order = [source, *dests]
    level = {0: 0}
    edges = []
    for i in range(1, len(order)):
        parent = (i - 1) // fanout
        level[i] = level[parent] + 1
        edges.append((order[parent], order[i], level[i]))
    return BroadcastPlan(source, edges, max(level.values()))


@dataclass
class ReductionPlan:
    sink: int
    levels: list[list[tuple[int, int]]] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def sink_in_degree(self) -> int:
        return sum(1 for _, dst in self.levels[-1] if dst == self.sink) if self.levels else 0


def plan_reduction(sources: list[int], sink: int, fanout: int, combinable: bool = True) -> ReductionPlan:
    """Combining tree with in-degree <= fanout; a non-combinable gather degenerates to a star."""
    streams = sorted(set(sources) - {sink})
    plan = ReductionPlan(sink)
    if not streams:
        return plan
    if combinable:
        while len(streams) > fanout:
            groups = [streams[i : i + fanout] for i in range(0, len(streams), fanout)]
            plan.levels.append([(member, g[0]) for g in groups for member in g[1:]])
            streams = [g[0] for g in groups]
    plan.levels.append([(s, sink) for s in streams])
    return plan


# -------- Runtime data manager --------
class DataManager:
    """Executes data movement for a running simulation."""

    def __init__(self, sim):
        self.sim = sim
        self.policy: DataPolicy = sim.policy.data
        self.directory = make_directory(self.policy)
        self.pending_flush: dict[str, int] = {}
        self.flush_event = None
        self.flushing: list[str] | None = None
        self.blocked: list[Callable[[], None]] = []
        self._arrivals: dict[tuple[int, str], list[Callable[[], None]]] = {}
        self._bcast_children: dict[tuple[object, str], list[int]] = {}

    # -------- placement helpers --------
    def _land(self, node, ref: DataRef) -> None:
        for victim in sorted(node.cache_put(ref)):
            self.directory.deregister(victim, node.id)
            self.sim.on_evicted(victim)
        self.directory.register(ref.id, node.id)

    def _peer_ok(self, ref: DataRef) -> bool:
        if ref.kind == DataKind.INTERMEDIATE:
            return self.policy.intermediate == "peer-to-peer"
        if ref.kind == DataKind.COMMON_INPUT:
            return self.policy.common_input == "push-broadcast"
        return ref.kind == DataKind.OUTPUT and self.policy.output == "collective"

    def _source_for(self, ref: DataRef, node_id: int) -> tuple[Route, object, float]:
        loc = self.directory.locate(ref.id)
        holders = sorted(h for h in loc.nodes if h != node_id and self.sim.node_usable(h))
        link = self.sim.network.link_load
        if holders and self._peer_ok(ref):
            return Route.NODE_TO_NODE, min(holders, key=lambda h: (link[h], h)), loc.cost
        if loc.on_ifs:
            return Route.IFS_READ, "ifs", loc.cost
        if loc.on_gfs:
            return Route.GFS_READ, "gfs", loc.cost
        if holders:
            return Route.NODE_TO_NODE, min(holders, key=lambda h: (link[h], h)), loc.cost
        raise UnknownDataError(f"{ref.id} has no reachable replica")

    # -------- stage-in --------
    def stage_in(self, attempt, on_ready: Callable[[], None]) -> None:
        """Bring every input to the attempt's first node; ``on_ready`` fires when all are pinned."""
        task = self.sim.graph.tasks[attempt.task]
        inputs = sorted(self.sim.graph.inputs_of(attempt.task), key=lambda r: r.id)
        if task.combinable and self.policy.reduce_gathers:
            self._reduce_then_stage(attempt, inputs, on_ready)
        else:
            self._stage(attempt, inputs, 0, on_ready)

    def _stage(self, attempt, inputs: list[DataRef], i: int, on_ready: Callable[[], None]) -> None:
        node = self.sim.nodes[attempt.node]
        while i < len(inputs):
            if not self.sim.is_live(attempt):
                return
            ref = inputs[i]
            if node.cache_get(ref.id):
                node.pin(ref.id)
                attempt.pinned.append(ref.id)
                i += 1
                continue
            key = (node.id, ref.id)
            if key in self._arrivals:
                self._arrivals[key].append(partial(self._stage, attempt, inputs, i, on_ready))
                return
            try:
                route, source, cost = self._source_for(ref, node.id)
            except UnknownDataError:
                self.sim.abort_attempt(attempt, ref.id)
                return
            if ref.size == 0 and cost == 0:
                if not self._try_land(node, ref, partial(self._stage, attempt, inputs, i, on_ready)):
                    return
                node.pin(ref.id)
                attempt.pinned.append(ref.id)
                i += 1
                continue
            self.sim.transfer(
                ref.id, ref.size, route, source, node.id,
                partial(self._staged, attempt, inputs, i, on_ready), extra=cost,
            )
            return
        on_ready()

    def _staged(self, attempt, inputs: list[DataRef], i: int, on_ready: Callable[[], None]) -> None:
        node = self.sim.nodes.get(attempt.node)
        ref = inputs[i]
        if node is None or not self.sim.node_usable(node.id):
            return
        if not self.sim.is_live(attempt):
            self._try_land(node, ref, None)
            return
        if not self._try_land(node, ref, partial(self._staged, attempt, inputs, i, on_ready)):
            return
        node.pin(ref.id)
        attempt.pinned.append(ref.id)
        self._stage(attempt, inputs, i + 1, on_ready)

    def _try_land(self, node, ref: DataRef, retry: Callable[[], None] | None) -> bool:
        """Cache ``ref``; when pinned collective outputs fill the node, wait for the next flush."""
        try:
            self._land(node, ref)
            return True
        except LocalStorageFullError:
            if retry is None:
                return False
            if not (self.pending_flush or self.flushing):
                raise SimulationInvariantError("cache-capacity", f"node {node.id} cannot hold {ref.id}") from None
            self.blocked.append(retry)
            return False

    # -------- reduction trees --------
    def _reduce_then_stage(self, attempt, inputs: list[DataRef], on_ready: Callable[[], None]) -> None:
        sink = attempt.node
        by_node: dict[int, int] = {}
        rest = []
        for ref in inputs:
            holders = sorted(h for h in self.directory.holders(ref.id) if self.sim.node_usable(h))
            if sink in holders or not holders:
                rest.append(ref)
            else:
                by_node[holders[0]] = max(by_node.get(holders[0], 0), ref.size)
        plan = plan_reduction(sorted(by_node), sink, self.policy.fanout, combinable=True)
        self._run_level(attempt, plan, 0, dict(by_node), partial(self._stage, attempt, rest, 0, on_ready))

    def _run_level(self, attempt, plan: ReductionPlan, level: int, sizes: dict[int, int], then: Callable[[], None]) -> None:
        if not self.sim.is_live(attempt):
            return
        if level >= plan.depth:
            then()
            return
        edges = [(s, d) for s, d in plan.levels[level] if sizes.get(s, 0) > 0]
        for src, dst in plan.levels[level]:
            if dst != plan.sink:
                sizes[dst] = max(sizes.get(dst, 0), sizes.get(src, 0))
        if not edges:
            self._run_level(attempt, plan, level + 1, sizes, then)
            return
        remaining = {"n": len(edges)}

        def one_done():
            remaining["n"] -= 1
            if remaining["n"] == 0:
                self._run_level(attempt, plan, level + 1, sizes, then)

        for src, dst in edges:
            self.sim.transfer(f"{attempt.task}.partial", sizes[src], Route.NODE_TO_NODE, src, dst, one_done)

    # -------- outputs --------
    def write_outputs(self, attempt, on_done: Callable[[], None]) -> None:
        outputs = [self.sim.graph.data[d] for d in self.sim.graph.tasks[attempt.task].outputs]
        self._write(attempt, outputs, 0, on_done)

    def needs_write_phase(self, task_id: str) -> bool:
        graph = self.sim.graph
        for d in graph.tasks[task_id].outputs:
            ref = graph.data[d]
            if ref.kind == DataKind.OUTPUT and (self.policy.output == "collective" or ref.size > 0):
                return True
            if ref.kind == DataKind.INTERMEDIATE and ref.size > 0 and not self._stays_local(task_id, ref):
                if self.policy.intermediate != "peer-to-peer":
                    return True
        return False

    def _stays_local(self, task_id: str, ref: DataRef) -> bool:
        """Intermediate consumed only inside the producer's pipeline group."""
        graph = self.sim.graph
        group = graph.tasks[task_id].group
        if not (self.sim.policy.dispatch.pipeline_grouping and group):
            return False
        consumers = graph.consumers[ref.id]
        return bool(consumers) and all(graph.tasks[c].group == group for c in consumers)

    def _write(self, attempt, outputs: list[DataRef], i: int, on_done: Callable[[], None]) -> None:
        node = self.sim.nodes[attempt.node]
        while i < len(outputs):
            if not self.sim.is_live(attempt):
                return
            ref = outputs[i]
            resume = partial(self._write, attempt, outputs, i, on_done)
            advance = partial(self._write, attempt, outputs, i + 1, on_done)
            if ref.kind == DataKind.OUTPUT:
                if self.policy.output == "collective":
                    if not self._try_land(node, ref, resume):
                        return
                    node.pin(ref.id)
                    self._queue_flush(ref.id, node.id)
                    i += 1
                    continue
                if ref.size == 0:
                    self.directory.mark_gfs(ref.id)
                    i += 1
                    continue
                self.sim.transfer(ref.id, ref.size, Route.GFS_WRITE, node.id, "gfs", partial(self._committed, ref, "gfs", attempt, advance))
                return
            # intermediate
            if self._stays_local(attempt.task, ref) or self.policy.intermediate == "peer-to-peer":
                if not self._try_land(node, ref, resume):
                    return
                i += 1
                continue
            if ref.size == 0:
                self._commit(ref, "ifs" if self.policy.intermediate == "ifs" else "gfs", node.id)
                i += 1
                continue
            if self.policy.intermediate == "ifs":
                self.sim.transfer(ref.id, ref.size, Route.IFS_WRITE, node.id, "ifs", partial(self._committed, ref, "ifs", attempt, advance))
            else:
                self.sim.transfer(ref.id, ref.size, Route.GFS_WRITE, node.id, "gfs", partial(self._committed, ref, "gfs", attempt, advance))
            return
        on_done()

    def _commit(self, ref: DataRef, where: str, node_id: int) -> None:
        if where == "ifs":
            self.directory.mark_ifs(ref.id, self.sim.machine.block_of(node_id))
            return
        self.directory.mark_gfs(ref.id)
        node = self.sim.nodes.get(node_id)
        if node is not None and self.sim.node_usable(node_id) and ref.kind == DataKind.INTERMEDIATE:
            self._try_land(node, ref, None)

    def _committed(self, ref: DataRef, where: str, attempt, advance: Callable[[], None]) -> None:
        # a pruned or killed writer never publishes its partial output
        if not self.sim.is_live(attempt):
            return
        self._commit(ref, where, attempt.node)
        advance()

    # -------- collective flushing --------
    def _queue_flush(self, data_id: str, node_id: int) -> None:
        self.pending_flush[data_id] = node_id
        self._arm_flush()

    def _arm_flush(self) -> None:
        if self.flush_event is not None or self.flushing or not self.pending_flush:
            return
        period, t0, now = self.policy.flush_period_sec, self.sim.kernel.start_time, self.sim.kernel.clock
        k = math.floor((now - t0) / period + 1e-9) + 1
        self.flush_event = self.sim.at(EventKind.FLUSH, t0 + k * period, self._on_flush)

    def _on_flush(self, event) -> None:
        self.flush_event = None
        self._start_flush(event.payload)

    def final_flush(self) -> bool:
        """Flush whatever is pending now; returns True if a flush is (still) in progress."""
        if self.flushing:
            return True
        if not self.pending_flush:
            return False
        self.sim.kernel.cancel(self.flush_event)
        self.flush_event = None
        event = self.sim.kernel.emit(EventKind.FLUSH, final=1)
        self._start_flush(event.payload)
        return self.flushing is not None

    def _start_flush(self, payload: dict) -> None:
        items = sorted(self.pending_flush)
        if not items:
            return
        total = sum(self.sim.graph.data[d].size for d in items)
        payload.update(items=len(items), bytes=total)
        self.flushing = items
        self.sim.transfer("flush-batch", total, Route.GFS_WRITE, "local", "gfs", partial(self._flushed, items))

    def _flushed(self, items: list[str]) -> None:
        for data_id in items:
            self.directory.mark_gfs(data_id)
            node_id = self.pending_flush.pop(data_id, None)
            node = self.sim.nodes.get(node_id) if node_id is not None else None
            if node is not None:
                node.unpin(data_id)
        self.flushing = None
        waiting, self.blocked = self.blocked, []
        for retry in waiting:
            retry()
        self._arm_flush()
        self.sim.check_complete()

    # -------- broadcast --------
    def broadcast_to(self, nodes: list[int]) -> None:
        """Push every still-needed common input to freshly granted nodes through a tree."""
        graph = self.sim.graph
        for data_id in sorted(graph.data):
            ref = graph.data[data_id]
            if ref.kind != DataKind.COMMON_INPUT or ref.size == 0:
                continue
            if not any(graph.tasks[c].state.value not in ("done", "pruned", "failed") for c in graph.consumers[data_id]):
                continue
            dests = [n for n in sorted(nodes) if self.sim.node_usable(n) and data_id not in self.sim.nodes[n].cache]
            if not dests:
                continue
            if self.sim.platform.utility_node_count > 0:
                root, tree_dests = UTILITY_ROOT, dests
            else:
                root, tree_dests = dests[0], dests[1:]
            plan = plan_broadcast(root, tree_dests, self.policy.fanout)
            for node in dests:
                self._arrivals[(node, data_id)] = []
            for parent, child, _ in plan.edges:
                self._bcast_children.setdefault((parent, data_id), []).append(child)
            logger.debug("broadcast %s to %d nodes, depth %d", data_id, len(dests), plan.depth)
            self.sim.transfer(data_id, ref.size, Route.GFS_READ, "gfs", root, partial(self._forward, root, ref))

    def _forward(self, node, ref: DataRef) -> None:
        children = self._bcast_children.pop((node, ref.id), [])
        if isinstance(node, int):
            if not self.sim.node_usable(node):
                self._abandon_all(children, ref.id)
                self._wake(node, ref.id)
                return
            self._try_land(self.sim.nodes[node], ref, None)
            self._wake(node, ref.id)
        for child in children:
            self.sim.transfer(ref.id, ref.size, Route.NODE_TO_NODE, node, child, partial(self._forward, child, ref))

    def _wake(self, node: int, data_id: str) -> None:
        for waiter in self._arrivals.pop((node, data_id), []):
            waiter()

    def _abandon_all(self, nodes: list[int], data_id: str) -> None:
        for node in nodes:
            children = self._bcast_children.pop((node, data_id), [])
            self._wake(node, data_id)
            self._abandon_all(children, data_id)

    # -------- loss --------
    def erase_node(self, node_id: int) -> list[str]:
        """Node storage is gone; returns items that no longer exist anywhere."""
        node = self.sim.nodes.get(node_id)
        if node is not None:
            node.erase()
        items = self.directory.drop_node(node_id)
        for data_id, holder in list(self.pending_flush.items()):
            if holder == node_id and not (self.flushing and data_id in self.flushing):
                del self.pending_flush[data_id]
                items.append(data_id)
        return sorted({d for d in items if not self.directory.holders(d) and not self.directory.durable(d)})

    def erase_block_shards(self, block_id: int) -> list[str]:
        lost = self.directory.drop_ifs_block(block_id)
        return [d for d in lost if not self.directory.holders(d) and d not in self.directory.gfs]

    def adopt(self, node_id: int, data_ids: list[str]) -> None:
        """Land a migrated task's resident inputs on its new node and pin them."""
        node = self.sim.nodes[node_id]
        for data_id in data_ids:
            ref = self.sim.graph.data[data_id]
            if self._try_land(node, ref, None):
                node.pin(data_id)
