"""Resource acquisition and release: static vs. dynamic provisioning, growth, idle release."""

import logging
import math

from src.core.platform import PlatformSpec, round_to_granularity
from src.core.policies import ProvisionPolicy

logger = logging.getLogger(__name__)

__all__ = ["Provisioner", "release_idle", "round_to_granularity"]


class Provisioner:
    """Decides how many nodes to ask for next. The only state is the growth cursor."""

    def __init__(self, policy: ProvisionPolicy, platform: PlatformSpec):
        self.policy = policy
        self.platform = platform
        self.cursor = 0
        self.frozen = False
        self.static_issued = False

    def growth_term(self, k: int) -> int:
        p = self.policy
        if p.growth == "constant":
            return p.step
        if p.growth == "arithmetic":
            return p.start + k * p.delta
        return math.ceil(p.start * p.ratio**k - 1e-9)

    def initial_request(self) -> int:
        return round_to_granularity(self.policy.static_nodes, self.platform.block_granularity, self.platform.node_count)

    def next_request(
        self,
        ready_count: int,
        idle_nodes: int,
        outstanding: int,
        remaining: int,
    ) -> int | None:
        """Nodes to request now, or None."""
        p = self.policy
        if self.frozen:
            return None
        if p.mode == "static":
            if self.static_issued:
                return None
            self.static_issued = True
            return min(self.initial_request(), remaining) or None
        if ready_count == 0:
            self.cursor = 0
            return None
        if ready_count <= idle_nodes or outstanding >= p.max_outstanding_requests:
            return None
        g = self.platform.block_granularity
        usable = (remaining // g) * g
        if usable <= 0:
            return None
        term = min(self.growth_term(self.cursor), self.platform.node_count)
        nodes = min(round_to_granularity(term, g, self.platform.node_count), usable)
        self.cursor += 1
        logger.debug("dynamic request #%d: %d nodes (ready=%d idle=%d)", self.cursor, nodes, ready_count, idle_nodes)
        return nodes

    def freeze(self) -> None:
        """No further requests (after a tail chop the restart allocation is final)."""
        self.frozen = True


def release_idle(blocks: dict[int, list[float | None]], now: float, policy: ProvisionPolicy) -> list[int]:
    """Blocks to release given each member node's idle-since time (None while busy)."""
    threshold = policy.idle_release_after_sec

    def settled(since: list[float | None]) -> bool:
        return all(s is not None and now - s >= threshold - 1e-9 for s in since)

    if policy.allow_partial_release:
        return sorted(b for b, since in blocks.items() if settled(since))
    if blocks and all(settled(since) for since in blocks.values()):
        return sorted(blocks)
    return []
