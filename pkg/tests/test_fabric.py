import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smartinf.engine import Engine, EngineConfig
from smartinf.errors import CapacityError, ConfigError, ContractViolation, UnsupportedOperation
from smartinf.fabric import (DeviceDesc, Extent, Fabric, FabricTopology, Raid0Volume,
                             TrafficLedger, raid0_map)


@pytest.fixture
def fabric(tmp_path):
    topo = FabricTopology([DeviceDesc("csd", capacity=1 << 20), DeviceDesc("ssd", capacity=1 << 20)])
    fab = Fabric(topo, tmp_path)
    for s in fab.stores:
        s.allocate("data", 1 << 16)
    yield fab
    fab.close()


def test_host_write_counts_and_roundtrips(fabric):
    payload = np.arange(1024, dtype=np.float32).tobytes()
    fabric.host_write(0, Extent(0, 4096), payload)
    assert fabric.ledger.total("host", "write") == 4096
    assert fabric.host_read(0, Extent(0, 4096)) == payload
    assert fabric.ledger.total("host", "read") == 4096
    assert fabric.ledger.total("internal", "read") == 0


def test_p2p_moves_only_internal_counters(fabric):
    fabric.p2p_write(0, Extent(0, 12288), bytes(12288))
    fabric.p2p_read(0, Extent(0, 12288))
    assert fabric.ledger.total("host", "read") == fabric.ledger.total("host", "write") == 0
    assert fabric.ledger.total("internal", "read", device=0) == 12288
    with pytest.raises(UnsupportedOperation):
        fabric.p2p_read(1, Extent(0, 16))


def test_bounds_and_capacity(tmp_path, fabric):
    with pytest.raises(ContractViolation):
        fabric.host_read(0, Extent(1 << 16, 1))
    with pytest.raises(ContractViolation):
        fabric.host_write(0, Extent(0, 8), bytes(4))
    with pytest.raises(CapacityError):
        fabric.stores[0].allocate("huge", 1 << 20)
    with pytest.raises(CapacityError):
        fabric.host_write(0, Extent((1 << 20) - 4, 8), bytes(8))


def test_phase_attribution_and_conservation(fabric):
    led = fabric.ledger
    assert led.current_phase == "update"
    with led.phase("backward_grad_offload"):
        fabric.host_write(0, Extent(0, 100), bytes(100))
    fabric.host_write(1, Extent(0, 50), bytes(50))
    s = TrafficLedger.summarize(led.snapshot())
    assert s["host_write_backward_grad_offload"] == 100 and s["host_write_update"] == 50
    assert s["host_write"] == sum(s[f"host_write_{p}"] for p in
                                  ("forward", "backward_grad_offload", "update"))
    assert led.transfers == 2
    with pytest.raises(ContractViolation):
        with led.phase("idle"):
            pass


def test_manifest_records_regions(fabric):
    doc = json.loads(fabric.stores[0].manifest_path.read_text())
    assert doc["device_id"] == 0 and doc["regions"]["data"] == {"offset": 0, "length": 1 << 16}


def test_raid0_examples():
    s = 100
    got = raid0_map(0, 4 * s, s, 2)
    assert [(d, e.offset, e.length) for d, e, _ in got] == [
        (0, 0, s), (1, 0, s), (0, s, s), (1, s, s)]
    assert [(d, e.offset, e.length) for d, e, _ in raid0_map(17, 500, 64, 1)] == [
        (0, 17, 47)] + [(0, o, 64) for o in range(64, 512, 64)] + [(0, 512, 5)]


@given(st.integers(0, 5000), st.integers(0, 5000), st.integers(1, 700), st.integers(1, 6))
def test_raid0_map_covers_extent_once(offset, length, stripe, n):
    pieces = raid0_map(offset, length, stripe, n)
    pos = offset
    for dev, ext, logical in pieces:
        assert logical == pos and 0 <= dev < n
        assert ext.offset // stripe == (ext.offset + ext.length - 1) // stripe
        pos += ext.length
    assert pos == offset + length


@given(st.lists(st.tuples(st.integers(0, 3000), st.integers(0, 3000)), max_size=8),
       st.integers(1, 300), st.integers(1, 4))
def test_raid0_volume_reassembles(tmp_path_factory, extents, stripe, n):
    d = tmp_path_factory.mktemp("raid")
    fab = Fabric(FabricTopology.uniform(n, "ssd"), d)
    vol = Raid0Volume(fab, range(n), stripe, 3000)
    data = np.random.default_rng(stripe).integers(0, 256, 3000, dtype=np.uint8).tobytes()
    vol.write(0, data)
    for a, b in extents:
        lo, hi = sorted((a, b))
        assert vol.read(lo, hi - lo) == data[lo:hi]
    fab.close()


def test_topology_json_roundtrip(tmp_path):
    topo = FabricTopology.uniform(3, "csd", read_bw=2e9, host_link_bw=8e9)
    topo.save(tmp_path / "t.json")
    back = FabricTopology.load(tmp_path / "t.json")
    assert back == topo and back.devices[2].read_bw == 2e9
    compact = FabricTopology.from_dict({"n_devices": 2, "device": {"kind": "ssd"}})
    assert [d.kind for d in compact.devices] == ["ssd", "ssd"]
    with pytest.raises(ConfigError):
        FabricTopology.load(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        FabricTopology.uniform(1, read_bw=0)
    with pytest.raises(ConfigError):
        FabricTopology.from_dict({"devices": [{}], "bogus": 1})
    with pytest.raises(ConfigError):
        FabricTopology.uniform(2, expansion=[[0, 1], [1]], expansion_bw=1e9)


def test_write_slower_than_read_is_allowed():
    FabricTopology.uniform(1, read_bw=3e9, write_bw=1e9)


def test_host_update_of_a_1024_param_model_moves_8m_each_way():
    # 31*31 + 31 + 31 + 1 = 1024 parameters, M = 2048 bytes
    with Engine(EngineConfig(mode="base", model_sizes=(31, 31, 1), deterministic=True),
                FabricTopology.uniform(2)) as eng:
        assert eng.model.n_params == 1024
        t = eng.train_step().traffic
    m = 2048
    assert t["host_read_update"] == 6 * m + 2 * m
    assert t["host_write_update"] == 6 * m
    assert t["host_write_backward_grad_offload"] == 2 * m
    assert t["internal_read"] == t["internal_write"] == 0


def test_near_storage_update_keeps_states_off_the_host_edge():
    with Engine(EngineConfig(mode="su_o", model_sizes=(31, 31, 1), deterministic=True),
                FabricTopology.uniform(3)) as eng:
        t = eng.train_step().traffic
    m = 2048
    assert (t["host_read"], t["host_write"]) == (2 * m, 2 * m)
    assert t["internal_read"] == 8 * m and t["internal_write"] == 6 * m
