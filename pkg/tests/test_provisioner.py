import pytest

from src.agents.provisioner import Provisioner, release_idle
from src.core.platform import PlatformSpec
from src.core.policies import ProvisionPolicy


def dynamic(**kw) -> ProvisionPolicy:
    return ProvisionPolicy(mode="dynamic", **kw)


def test_static_requests_once():
    prov = Provisioner(ProvisionPolicy(mode="static", static_nodes=100), PlatformSpec(node_count=128, block_granularity=64))
    assert prov.next_request(ready_count=5, idle_nodes=0, outstanding=0, remaining=128) == 128
    assert prov.next_request(ready_count=5, idle_nodes=0, outstanding=0, remaining=0) is None


def test_geometric_growth_rounds_to_blocks():
    prov = Provisioner(dynamic(growth="geometric", start=1, ratio=2.0), PlatformSpec(node_count=64, block_granularity=4))
    sizes = [prov.next_request(ready_count=1000, idle_nodes=0, outstanding=0, remaining=64) for _ in range(4)]
    assert sizes == [4, 4, 4, 8]


def test_arithmetic_growth_terms():
    prov = Provisioner(dynamic(growth="arithmetic", start=2, delta=3), PlatformSpec(node_count=64))
    assert [prov.growth_term(k) for k in range(4)] == [2, 5, 8, 11]


def test_no_request_when_idle_covers_ready_or_requests_outstanding():
    prov = Provisioner(dynamic(step=8), PlatformSpec(node_count=64))
    assert prov.next_request(ready_count=4, idle_nodes=4, outstanding=0, remaining=64) is None
    assert prov.next_request(ready_count=10, idle_nodes=0, outstanding=1, remaining=64) is None
    assert prov.next_request(ready_count=10, idle_nodes=0, outstanding=0, remaining=6) == 6


def test_empty_queue_resets_growth_cursor():
    prov = Provisioner(dynamic(growth="geometric", start=2, ratio=2.0), PlatformSpec(node_count=64))
    prov.next_request(ready_count=10, idle_nodes=0, outstanding=0, remaining=64)
    prov.next_request(ready_count=10, idle_nodes=0, outstanding=0, remaining=64)
    assert prov.cursor == 2
    prov.next_request(ready_count=0, idle_nodes=0, outstanding=0, remaining=64)
    assert prov.cursor == 0


def test_frozen_provisioner_never_requests():
    prov = Provisioner(dynamic(step=4), PlatformSpec(node_count=64))
    prov.freeze()
    assert prov.next_request(ready_count=10, idle_nodes=0, outstanding=0, remaining=64) is None


def test_geometric_ratio_must_exceed_one():
    with pytest.raises(ValueError):
        dynamic(growth="geometric", ratio=1.0)


def test_partial_release_only_settled_blocks():
    policy = dynamic(idle_release_after_sec=10.0, allow_partial_release=True)
    blocks = {0: [0.0, 5.0], 1: [0.0, None], 2: [1.0, 1.0]}
    assert release_idle(blocks, 15.0, policy) == [0, 2]


def test_whole_release_waits_for_every_block():
    policy = dynamic(idle_release_after_sec=10.0, allow_partial_release=False)
    assert release_idle({0: [0.0], 1: [None]}, 20.0, policy) == []
    assert release_idle({0: [0.0], 1: [2.0]}, 20.0, policy) == [0, 1]
