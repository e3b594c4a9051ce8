"""The simulated machine: nodes with local caches, shared file systems, links, block allocation."""

import itertools
import logging
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from pydantic import Field, model_validator

from src.core.errors import (
    InvalidParametersError,
    LocalStorageFullError,
    ObjectLargerThanCacheError,
    RequestExceedsMachineError,
)
from src.core.model import DataRef
from src.core.utils import SpecModel

logger = logging.getLogger(__name__)


class PlatformSpec(SpecModel):
    node_count: int = Field(ge=1)
    block_granularity: int = Field(default=1, ge=1)
    cores_per_node: int = Field(default=1, ge=1)
    local_storage_bytes: int = Field(default=64 * 10**9, gt=0)
    gfs_bandwidth_bytes_per_sec: float = Field(default=10**9, gt=0)
    gfs_latency_sec: float = Field(default=0.0, ge=0)
    node_link_bandwidth_bytes_per_sec: float = Field(default=10**8, gt=0)
    ifs_enabled: bool = False
    ifs_bandwidth_bytes_per_sec: float | None = Field(default=None, gt=0)
    utility_node_count: int = Field(default=1, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.node_count % self.block_granularity:
            raise InvalidParametersError(
                f"node-count {self.node_count} is not a multiple of block-granularity {self.block_granularity}"
            )
        if self.ifs_enabled and self.ifs_bandwidth_bytes_per_sec is None:
            raise InvalidParametersError("ifs-enabled needs ifs-bandwidth-bytes-per-sec")
        return self

    @property
    def block_count(self) -> int:
        return self.node_count // self.block_granularity


PRESETS = {
    "ranger": {"node-count": 64, "block-granularity": 1, "cores-per-node": 16},
    "bgl": {"node-count": 1024, "block-granularity": 32, "cores-per-node": 2},
    "bgp": {"node-count": 1024, "block-granularity": 64, "cores-per-node": 4},
}


def preset(name: str, **overrides) -> PlatformSpec:
    if name not in PRESETS:
        raise InvalidParametersError(f"unknown platform preset {name!r}; known: {sorted(PRESETS)}")
    return PlatformSpec.model_validate({**PRESETS[name], **overrides})


# -------- Network --------
class Route(str, Enum):
    GFS_READ = "gfs-read"
    GFS_WRITE = "gfs-write"
    NODE_TO_NODE = "node-to-node"
    IFS_READ = "ifs-read"
    IFS_WRITE = "ifs-write"

    @property
    def shared_group(self) -> str | None:
        if self in (Route.GFS_READ, Route.GFS_WRITE):
            return "gfs"
        if self in (Route.IFS_READ, Route.IFS_WRITE):
            return "ifs"
        return None


def transfer_time(spec: PlatformSpec, size: int, route: Route, concurrent_load: int = 1) -> float:
    """Latency plus size over the route's bandwidth, fair-shared among concurrent transfers."""
    if size < 0:
        raise InvalidParametersError(f"negative transfer size {size}")
    if route.shared_group == "gfs":
        return spec.gfs_latency_sec + size / (spec.gfs_bandwidth_bytes_per_sec / max(1, concurrent_load))
    if route.shared_group == "ifs":
        return size / (spec.ifs_bandwidth_bytes_per_sec / max(1, concurrent_load))
    return size / spec.node_link_bandwidth_bytes_per_sec


@dataclass
class Flow:
    """The byte phase of one transfer. ``remaining`` is as of ``since``."""

    id: int
    route: Route
    source: object
    remaining: float
    rate: float = 0.0
    since: float = 0.0

    @property
    def finish(self) -> float:
        if self.remaining <= 0:
            return self.since
        return self.since + self.remaining / self.rate


class Network:
    """Processor-shared transfers.

    Flows on a shared route group (gfs, ifs) split the group's bandwidth evenly; every
    open or close on a group re-rates all of its flows, and the caller reschedules the
    flows it gets back. Node-to-node links are unshared. ``link_load`` counts open flows
    per sending node for source selection.
    """

    def __init__(self, spec: PlatformSpec):
        self.spec = spec
        self.groups: dict[str, dict[int, Flow]] = {}
        self.link_load: Counter = Counter()
        self._ids = itertools.count()

    def active(self, group: str) -> int:
        return len(self.groups.get(group, ()))

    def bandwidth(self, route: Route) -> float:
        group = route.shared_group
        if group == "gfs":
            return self.spec.gfs_bandwidth_bytes_per_sec
        if group == "ifs":
            return self.spec.ifs_bandwidth_bytes_per_sec
        return self.spec.node_link_bandwidth_bytes_per_sec

    def latency(self, route: Route) -> float:
        return self.spec.gfs_latency_sec if route.shared_group == "gfs" else 0.0

    def open(self, now: float, size: int, route: Route, source=None) -> tuple[Flow, list[Flow]]:
        """Start moving ``size`` bytes; returns the new flow and every flow whose rate was set."""
        if size < 0:
            raise InvalidParametersError(f"negative transfer size {size}")
        flow = Flow(next(self._ids), route, source, float(size), since=now)
        group = route.shared_group
        if group is None:
            self.link_load[source] += 1
            flow.rate = self.bandwidth(route)
            return flow, [flow]
        flows = self.groups.setdefault(group, {})
        self._settle(flows, now)
        flows[flow.id] = flow
        return flow, self._share(flows, route)

    def close(self, now: float, flow: Flow) -> list[Flow]:
        """Finish ``flow``; returns the flows left on its group, re-rated."""
        group = flow.route.shared_group
        if group is None:
            self.link_load[flow.source] -= 1
            return []
        flows = self.groups.get(group, {})
        self._settle(flows, now)
        flows.pop(flow.id, None)
        return self._share(flows, flow.route)

    @staticmethod
    def _settle(flows: dict[int, Flow], now: float) -> None:
        for f in flows.values():
            f.remaining = max(0.0, f.remaining - f.rate * (now - f.since))
            f.since = now

    def _share(self, flows: dict[int, Flow], route: Route) -> list[Flow]:
        rate = self.bandwidth(route) / max(1, len(flows))
        for f in flows.values():
            f.rate = rate
        return sorted(flows.values(), key=lambda f: f.id)


# -------- Nodes --------
@dataclass
class NodeState:
    """One worker node. ``cache`` keeps recency order (oldest first)."""

    id: int
    block_id: int
    capacity: int
    busy: str | None = None
    alive: bool = True
    idle_since: float | None = None
    cache: OrderedDict = field(default_factory=OrderedDict)
    pins: Counter = field(default_factory=Counter)

    @property
    def used(self) -> int:
        return sum(self.cache.values())

    def cache_get(self, data_id: str) -> bool:
        if data_id not in self.cache:
            return False
        self.cache.move_to_end(data_id)
        return True

    def cache_put(self, ref: DataRef) -> set[str]:
        """Insert ``ref``, evicting least-recently-used unpinned entries; returns the evicted ids."""
        if ref.size > self.capacity:
            raise ObjectLargerThanCacheError(f"{ref.id} ({ref.size} B) exceeds node {self.id} storage {self.capacity} B")
        if ref.id in self.cache:
            self.cache.move_to_end(ref.id)
            return set()
        used = self.used
        victims = []
        for data_id, size in self.cache.items():
            if used + ref.size <= self.capacity:
                break
            if self.pins[data_id]:
                continue
            victims.append(data_id)
            used -= size
        if used + ref.size > self.capacity:
            raise LocalStorageFullError(f"node {self.id}: pinned data leaves no room for {ref.id}")
        for data_id in victims:
            del self.cache[data_id]
        self.cache[ref.id] = ref.size
        return set(victims)

    def pin(self, data_id: str) -> None:
        self.pins[data_id] += 1

    def unpin(self, data_id: str) -> None:
        if self.pins[data_id] > 0:
            self.pins[data_id] -= 1
        if self.pins[data_id] == 0:
            del self.pins[data_id]

    def erase(self) -> list[str]:
        """Drop every cached item (allocation released or node crashed)."""
        lost = list(self.cache)
        self.cache.clear()
        self.pins.clear()
        return lost


# -------- Allocation --------
@dataclass
class AllocationBlock:
    id: int
    node_ids: tuple[int, ...]
    grant_id: int
    granted_at: float
    released_at: float | None = None


def round_to_granularity(requested: int, granularity: int, node_count: int) -> int:
    if requested < 1:
        raise InvalidParametersError(f"requested nodes must be >= 1, got {requested}")
    if requested > node_count:
        raise RequestExceedsMachineError(f"request for {requested} nodes exceeds machine of {node_count}")
    return min(math.ceil(requested / granularity) * granularity, node_count)


class Machine:
    """Block bookkeeping. Blocks are reserved on request and granted later, always whole."""

    def __init__(self, spec: PlatformSpec):
        self.spec = spec
        g = spec.block_granularity
        self.block_nodes = {b: tuple(range(b * g, (b + 1) * g)) for b in range(spec.block_count)}
        self.free: set[int] = set(self.block_nodes)
        self.allocated: dict[int, AllocationBlock] = {}
        self._grants = 0

    @property
    def free_nodes(self) -> int:
        return len(self.free) * self.spec.block_granularity

    @property
    def allocated_nodes(self) -> int:
        return len(self.allocated) * self.spec.block_granularity

    def block_of(self, node_id: int) -> int:
        return node_id // self.spec.block_granularity

    def reserve(self, nodes: int) -> tuple[int, list[int]]:
        """Take the lowest free blocks covering ``nodes``; returns (grant id, block ids)."""
        count = nodes // self.spec.block_granularity
        if count > len(self.free):
            raise RequestExceedsMachineError(f"{nodes} nodes requested, {self.free_nodes} free")
        blocks = sorted(self.free)[:count]
        self.free.difference_update(blocks)
        grant_id = self._grants
        self._grants += 1
        return grant_id, blocks

    def unreserve(self, blocks: list[int]) -> None:
        self.free.update(blocks)

    def grant(self, block_id: int, grant_id: int, now: float) -> AllocationBlock:
        block = AllocationBlock(block_id, self.block_nodes[block_id], grant_id, now)
        self.allocated[block_id] = block
        return block

    def release(self, block_id: int, now: float) -> AllocationBlock:
        block = self.allocated.pop(block_id)
        block.released_at = now
        self.free.add(block_id)
        return block
