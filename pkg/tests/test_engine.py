import numpy as np
import pytest
from hypothesis import given, strategies as st

from smartinf.engine import (Engine, EngineConfig, partition_parameters,
                             run_experiment, split_at, write_aggregate_csv, write_reports_csv)
from smartinf.errors import ConfigError, ContractViolation
from smartinf.fabric import FabricTopology
from smartinf.numerics import OptimizerConfig


def _bits(a):
    return np.asarray(a).tobytes()


def _run(mode, steps, devices=1, **kw):
    cfg = EngineConfig(mode=mode, deterministic=kw.pop("deterministic", True), **kw)
    topo = None if mode == "memory" else FabricTopology.uniform(devices)
    with Engine(cfg, topo) as eng:
        reports = [eng.train_step() for _ in range(steps)]
        return reports, eng.params16.copy(), eng.master_state()


# partitioning

def test_partition_ten_over_three():
    parts = partition_parameters(10, 3)
    assert [s.length for _, s in parts] == [4, 3, 3]
    assert [s.offset for _, s in parts] == [0, 4, 7]


@given(st.integers(1, 10 ** 7), st.integers(1, 64))
def test_partition_covers_and_balances(n, d):
    if n < d:
        with pytest.raises(ConfigError):
            partition_parameters(n, d)
        return
    parts = partition_parameters(n, d)
    lengths = [s.length for _, s in parts]
    assert [dev for dev, _ in parts] == list(range(d))
    assert sum(lengths) == n and max(lengths) - min(lengths) <= 1
    pos = 0
    for _, s in parts:
        assert s.offset == pos
        pos = s.stop


@pytest.mark.parametrize("sizes", [(255, 255, 1), (31, 64, 64, 3), (7, 1)])
def test_partition_ignores_layer_shapes(sizes):
    # only the flat length matters; block edges do not move the cuts
    cfg = EngineConfig(mode="su_o", model_sizes=sizes)
    with Engine(cfg, FabricTopology.uniform(3)) as eng:
        n = eng.model.n_params
        assert ([(d, s.offset, s.length) for d, s in eng.partition]
                == [(d, s.offset, s.length) for d, s in partition_parameters(n, 3)])


@given(st.integers(0, 1000), st.integers(1, 1000),
       st.lists(st.integers(0, 3000), max_size=8))
def test_split_at_pieces(lo, n, cuts):
    pieces = split_at(lo, n, cuts)
    assert sum(k for _, k in pieces) == n
    assert pieces[0][0] == lo
    for (a, k), (b, _) in zip(pieces, pieces[1:]):
        assert a + k == b and b in cuts
    assert all(k > 0 for _, k in pieces)


# mode equivalence

@pytest.mark.parametrize("kind", ["adam", "sgd_momentum", "adagrad"])
def test_modes_bit_identical(kind):
    opt = OptimizerConfig(kind=kind, lr=1e-3 if kind != "sgd_momentum" else 1e-2)
    ref = _run("memory", 6, optimizer=opt)
    for mode in ("base", "su", "su_o"):
        got = _run(mode, 6, devices=3, optimizer=opt)
        assert [r.loss for r in got[0]] == [r.loss for r in ref[0]], mode
        assert _bits(got[1]) == _bits(ref[1]), mode
        for v in ref[2]:
            assert _bits(got[2][v]) == _bits(ref[2][v]), (mode, v)


def test_threaded_pipelines_match_memory():
    ref = _run("memory", 5)
    got = _run("su_o", 5, devices=3, deterministic=False)
    assert _bits(got[1]) == _bits(ref[1])
    for v in ref[2]:
        assert _bits(got[2][v]) == _bits(ref[2][v])


def test_small_device_memory_many_subgroups():
    ref = _run("memory", 3)
    cfg = EngineConfig(mode="su_o", deterministic=True)
    topo = FabricTopology.uniform(2, accel_mem_capacity=1000 * 18)
    with Engine(cfg, topo) as eng:
        assert len(eng.tasklets[0]) > 10
        for _ in range(3):
            eng.train_step()
        assert _bits(eng.params16) == _bits(ref[1])


def test_full_k_compression_equals_su():
    ref = _run("su", 4, devices=2)
    cfg = EngineConfig(mode="su_o_c", compression_pct=100.0, deterministic=True)
    with Engine(cfg, FabricTopology.uniform(2)) as eng:
        eng.keep_fraction = 1.0  # every entry survives Top-K
        reports = [eng.train_step() for _ in range(4)]
        assert reports[0].kept_pairs == 65536
        assert _bits(eng.params16) == _bits(ref[1])
        state = eng.master_state()
    for v in state:
        assert _bits(state[v]) == _bits(ref[2][v])


def test_hundred_percent_keeps_half():
    # c percent of the dense gradient bytes at 8 B per kept pair
    r = _run("su_o_c", 1, compression_pct=100.0)[0][0]
    assert r.kept_pairs == 65280 // 2 + 256 // 2


def test_compressed_mode_differs_and_counts_pairs():
    reports, params, _ = _run("su_o_c", 2, devices=2, compression_pct=2.0)
    # per block: max(1, round(len * 0.01)); blocks are 65280 and 256 long
    assert reports[0].kept_pairs == 653 + 3
    assert reports[0].nominal_comp_bytes == 8 * 656
    assert not np.array_equal(params, _run("su", 2, devices=2)[1])


# traffic

M = 2 * 65536


@pytest.mark.parametrize("mode,rd,wr", [("base", 8, 8), ("su", 2, 2), ("su_o", 2, 2)])
def test_host_traffic_per_iteration(mode, rd, wr):
    reports, _, _ = _run(mode, 2, devices=2)
    for r in reports:
        assert r.traffic["host_read"] == rd * M
        assert r.traffic["host_write"] == wr * M


def test_su_internal_traffic():
    t = _run("su_o", 1, devices=4)[0][0].traffic
    assert t["internal_read"] == 8 * M
    assert t["internal_write"] == 6 * M
    assert t["host_write_backward_grad_offload"] == 2 * M
    assert t["host_read_update"] == 2 * M


def test_sgd_moves_three_quarters_of_adam_state():
    adam = _run("su", 1, devices=2)[0][0].traffic
    sgd = _run("su", 1, devices=2, optimizer=OptimizerConfig(kind="sgd_momentum"))[0][0].traffic
    # reads: 3 of 4 fp32 arrays (params, momentum, gradient); writes: 2 of 3 states
    assert sgd["internal_read"] * 4 == adam["internal_read"] * 3
    assert sgd["internal_write"] * 3 == adam["internal_write"] * 2
    assert sgd["host_read"] == adam["host_read"] and sgd["host_write"] == adam["host_write"]


def test_compressed_host_write_is_headers_plus_pairs():
    cfg = EngineConfig(mode="su_o_c", compression_pct=10.0, deterministic=True)
    with Engine(cfg, FabricTopology.uniform(3)) as eng:
        r = eng.train_step()
        pieces = sum(len(v) for v in eng.sparse_route.values())
    assert r.traffic["host_write"] == 16 * pieces + 6 * r.kept_pairs
    assert r.traffic["host_read"] == 2 * M


def test_sparse_pieces_split_at_device_boundaries():
    cfg = EngineConfig(mode="su_o_c", compression_pct=2.0, deterministic=True)
    with Engine(cfg, FabricTopology.uniform(3)) as eng:
        cuts = {s.offset for _, s in eng.partition}
        for i, lo, size in eng.blocks:
            starts = [lo + rel for rel, *_ in eng.sparse_route[i]]
            assert all(c in starts for c in cuts if lo < c < lo + size)
            for (rel, dev, _, _) in eng.sparse_route[i]:
                assert eng._owner(lo + rel) == dev


# gate and loss scaling

def test_overflow_skips_the_update():
    cfg = EngineConfig(mode="su_o", deterministic=True)
    with Engine(cfg, FabricTopology.uniform(2)) as eng:
        before = eng.master_state()
        p16 = eng.params16.copy()
        x, y = eng.data.next_batch()
        r = eng.train_step((x, y * 1e6))
        assert r.skipped and eng.step == 0
        assert eng.scaler.scale == cfg.initial_loss_scale / 2
        assert r.traffic["host_read"] == 0
        after = eng.master_state()
        for v in before:
            assert _bits(after[v]) == _bits(before[v])
        assert _bits(eng.params16) == _bits(p16)
        r2 = eng.train_step()
        assert not r2.skipped and eng.step == 1


def test_clipping_reported():
    reports, _, _ = _run("memory", 3, max_grad_norm=1e-3)
    assert all(0 < r.clip_scale < 1 for r in reports)


def test_shape_mismatch_rejected():
    with Engine(EngineConfig(mode="su_o"), FabricTopology.uniform(1)) as eng:
        with pytest.raises(ContractViolation):
            eng.offload_gradients(0, np.zeros(3, np.float16), np.float32(1), {})


# experiments

def test_zero_steps():
    reports, agg = run_experiment(EngineConfig(mode="su_o"), 0, FabricTopology.uniform(1))
    assert reports == [] and agg["steps"] == 0 and agg["final_eval_loss"] is None


def test_negative_steps_rejected():
    with pytest.raises(ConfigError):
        run_experiment(EngineConfig(mode="memory"), -1)


@pytest.mark.parametrize("cfg", [
    EngineConfig(mode="su_o_c"),
    EngineConfig(mode="su_o", compression_pct=2.0),
    EngineConfig(mode="su_o_c", compression_pct=0.0),
    EngineConfig(mode="warp"),
])
def test_invalid_engine_configs(cfg):
    with pytest.raises(ConfigError):
        Engine(cfg)


def test_report_csvs(tmp_path):
    reports, agg = run_experiment(EngineConfig(mode="su", deterministic=True), 3,
                                  FabricTopology.uniform(2))
    write_reports_csv(reports, tmp_path / "steps.csv")
    write_aggregate_csv(agg, tmp_path / "agg.csv")
    lines = (tmp_path / "steps.csv").read_text().splitlines()
    assert len(lines) == 4
    assert "host_read" in lines[0]
    assert (tmp_path / "agg.csv").read_text().count("\n") >= 2


def test_training_reduces_loss():
    _, agg = run_experiment(EngineConfig(mode="memory"), 60)
    with Engine(EngineConfig(mode="memory")) as eng:
        start = eng.eval_loss()
    assert agg["final_eval_loss"] < 0.8 * start
