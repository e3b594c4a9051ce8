import pytest

from src.core.errors import InvalidParametersError, LocalStorageFullError, ObjectLargerThanCacheError, RequestExceedsMachineError
from src.core.model import DataKind, DataRef
from src.core.platform import Machine, Network, NodeState, PlatformSpec, Route, preset, round_to_granularity, transfer_time


def ref(name: str, size: int) -> DataRef:
    return DataRef(id=name, size=size, kind=DataKind.UNIQUE_INPUT)


def test_node_count_must_be_multiple_of_granularity():
    with pytest.raises(ValueError):
        PlatformSpec(node_count=100, block_granularity=64)


def test_presets():
    assert preset("bgp").block_granularity == 64
    assert preset("ranger", **{"node-count": 128}).node_count == 128
    with pytest.raises(InvalidParametersError):
        preset("cray")


def test_transfer_time_shares_gfs_bandwidth():
    spec = PlatformSpec(node_count=4, gfs_bandwidth_bytes_per_sec=100.0, gfs_latency_sec=1.0)
    assert transfer_time(spec, 100, Route.GFS_READ) == pytest.approx(2.0)
    assert transfer_time(spec, 100, Route.GFS_READ, concurrent_load=4) == pytest.approx(5.0)


def test_network_fair_shares_running_transfers():
    spec = PlatformSpec(node_count=4, gfs_bandwidth_bytes_per_sec=100.0)
    net = Network(spec)
    first, rated = net.open(0.0, 100, Route.GFS_WRITE)
    assert [f.finish for f in rated] == [pytest.approx(1.0)]
    second, rated = net.open(0.0, 100, Route.GFS_READ)
    # the running write slows down to share the group with the new read
    assert [f.id for f in rated] == [first.id, second.id]
    assert [f.finish for f in rated] == [pytest.approx(2.0), pytest.approx(2.0)]
    assert net.active("gfs") == 2
    third, _ = net.open(1.0, 50, Route.GFS_READ)
    assert first.remaining == pytest.approx(50.0)
    assert [f.finish for f in (first, second, third)] == [pytest.approx(2.5)] * 3
    rated = net.close(2.5, first)
    assert [f.id for f in rated] == [second.id, third.id]
    assert [f.finish for f in rated] == [pytest.approx(2.5)] * 2
    link, rated = net.open(0.0, 10, Route.NODE_TO_NODE, source=2)
    assert rated == [link] and net.link_load[2] == 1
    assert net.close(1.0, link) == []
    assert net.link_load[2] == 0


def test_round_to_granularity():
    assert round_to_granularity(1, 64, 1024) == 64
    assert round_to_granularity(65, 64, 1024) == 128
    with pytest.raises(RequestExceedsMachineError):
        round_to_granularity(2048, 64, 1024)


def test_cache_evicts_least_recently_used_unpinned():
    node = NodeState(0, 0, capacity=100)
    node.cache_put(ref("a", 40))
    node.cache_put(ref("b", 40))
    node.cache_get("a")
    assert node.cache_put(ref("c", 40)) == {"b"}
    node.pin("a")
    node.pin("c")
    with pytest.raises(LocalStorageFullError):
        node.cache_put(ref("d", 40))
    with pytest.raises(ObjectLargerThanCacheError):
        node.cache_put(ref("huge", 101))


def test_machine_reserves_lowest_blocks_and_releases():
    machine = Machine(PlatformSpec(node_count=8, block_granularity=2))
    grant, blocks = machine.reserve(4)
    assert blocks == [0, 1]
    for b in blocks:
        machine.grant(b, grant, 0.0)
    assert machine.allocated_nodes == 4
    assert machine.free_nodes == 4
    assert machine.block_of(5) == 2
    block = machine.release(1, 10.0)
    assert block.node_ids == (2, 3)
    assert machine.free_nodes == 6
    with pytest.raises(RequestExceedsMachineError):
        machine.reserve(8)
