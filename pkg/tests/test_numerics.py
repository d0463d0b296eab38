import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from smartinf import kernels, reference
from smartinf.errors import ContractViolation, SkippedStep
from smartinf.numerics import (FlatSegment, GradCheckAccumulator, LossScaler, OptimizerConfig,
                               OptimizerShard, apply_update, axpby, check_gradients,
                               clip_scale_from_norm, narrow, widen)

f32 = np.float32
BACKENDS = sorted(kernels.available_backends().items())


def bits(a):
    return np.asarray(a).tobytes()


def test_axpby_examples():
    assert axpby(1, [1, 2], 0, [9, 9]).tolist() == [1, 2]
    assert axpby(0.9, [1, 1], 0.1, [1, 1]).tolist() == [1, 1]
    assert axpby(0.5, [2, 4], 2, [1, 1]).tolist() == [3, 4]


def test_axpby_leaves_inputs_alone_and_checks_length():
    a = np.array([1, 2], f32)
    b = np.array([3, 4], f32)
    axpby(2, a, 3, b)
    assert a.tolist() == [1, 2] and b.tolist() == [3, 4]
    with pytest.raises(ContractViolation):
        axpby(1, [1, 2], 1, [1])


def test_first_adam_step_from_zero_state():
    sh = OptimizerShard.from_params([0.0])
    p16 = apply_update(sh, np.array([1.0], f32), OptimizerConfig(lr=0.1))
    assert sh.params32[0] == pytest.approx(-0.1, rel=1e-6)
    assert p16.dtype == np.float16 and sh.step_count == 1


@pytest.mark.parametrize("kind", ["adam", "sgd_momentum", "adagrad"])
def test_zero_gradient_is_a_fixed_point(kind):
    sh = OptimizerShard.from_params([1.0, -2.0, 3.0])
    apply_update(sh, np.zeros(3, f32), OptimizerConfig(kind=kind))
    assert sh.params32.tolist() == [1.0, -2.0, 3.0]


def test_plain_sgd():
    sh = OptimizerShard.from_params([2.0])
    apply_update(sh, np.array([0.5], f32), OptimizerConfig("sgd_momentum", lr=1, momentum_coef=0))
    assert sh.params32.tolist() == [1.5]


def test_apply_update_preconditions():
    sh = OptimizerShard.from_params([1.0, 2.0])
    with pytest.raises(ContractViolation):
        apply_update(sh, np.zeros(3, f32), OptimizerConfig())
    for clip in (0.0, 1.5):
        with pytest.raises(ContractViolation):
            apply_update(sh, np.zeros(2, f32), OptimizerConfig(), clip)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_gradient_skips_without_touching_state(bad):
    sh = OptimizerShard.from_params([1.0, 2.0])
    before = sh.copy()
    with pytest.raises(SkippedStep):
        apply_update(sh, np.array([0.1, bad], f32), OptimizerConfig())
    assert bits(sh.params32) == bits(before.params32) and sh.step_count == 0


def test_config_validation():
    with pytest.raises(ContractViolation):
        OptimizerConfig(kind="lamb")
    with pytest.raises(ContractViolation):
        OptimizerConfig(beta1=1.0)
    with pytest.raises(ContractViolation):
        OptimizerConfig(eps=0.0)
    cfg = OptimizerConfig(kind="sgd_momentum", beta2=0.5)
    assert cfg.beta2 == 0.5 and cfg.state_variables == ("params32", "momentum")


def test_shard_size_is_six_m():
    sh = OptimizerShard.from_params(np.zeros(1000))
    assert sh.nbytes == 6 * (2 * 1000)


def test_flat_segment_invariants():
    with pytest.raises(ContractViolation):
        FlatSegment(0, 0)
    seg = FlatSegment(10, 5)
    with pytest.raises(ContractViolation):
        seg.check_within(14)
    seg.check_within(15)
    assert seg.slice(12, 2).offset == 12
    with pytest.raises(ContractViolation):
        seg.slice(14, 2)


def f32s(lo, hi):
    return st.floats(lo, hi).map(lambda x: float(np.float32(x)))


finite_f32 = f32s(-1e3, 1e3)
vec = st.integers(1, 24).flatmap(lambda n: st.tuples(
    *[hnp.arrays(np.float32, n, elements=e) for e in
      (finite_f32, finite_f32, f32s(0, 1e3), finite_f32)]))


@pytest.mark.parametrize("name,backend", BACKENDS)
@given(vals=vec, step=st.integers(0, 50), clip=f32s(0.01, 1.0),
       lr=f32s(1e-5, 1.0), bc=st.booleans())
def test_adam_matches_scalar_reference(name, backend, vals, step, clip, lr, bc):
    p, m, v, g = vals
    cfg = OptimizerConfig(lr=float(lr), bias_correction=bc)
    sh = OptimizerShard(p.copy(), m.copy(), v.copy(), step)
    apply_update(sh, g, cfg, float(clip), backend=backend)
    ref = reference.adam_scalar(p, m, v, g, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                eps=cfg.eps, step=step + 1, clip=clip, bias_correction=bc)
    assert [bits(x) for x in (sh.params32, sh.momentum, sh.variance)] == [bits(x) for x in ref]
    assert (sh.variance >= 0).all()


@pytest.mark.parametrize("name,backend", BACKENDS)
@given(vals=vec, clip=f32s(0.01, 1.0), mu=f32s(0, 0.99))
def test_sgd_and_adagrad_match_scalar_reference(name, backend, vals, clip, mu):
    p, m, v, g = vals
    sh = OptimizerShard(p.copy(), m.copy(), v.copy())
    apply_update(sh, g, OptimizerConfig("sgd_momentum", lr=0.01, momentum_coef=float(mu)),
                 float(clip), backend=backend)
    rp, rm = reference.sgd_momentum_scalar(p, m, g, lr=0.01, momentum_coef=float(mu), clip=clip)
    assert bits(sh.params32) == bits(rp) and bits(sh.momentum) == bits(rm)

    sh = OptimizerShard(p.copy(), m.copy(), v.copy())
    apply_update(sh, g, OptimizerConfig("adagrad", lr=0.01), float(clip), backend=backend)
    rp, rv = reference.adagrad_scalar(p, v, g, lr=0.01, eps=1e-8, clip=clip)
    assert bits(sh.params32) == bits(rp) and bits(sh.variance) == bits(rv)
    assert (sh.variance >= 0).all()


def test_backends_agree_bit_for_bit():
    if len(BACKENDS) < 2:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(3)
    n = 10_000
    p, m, g = (rng.standard_normal(n).astype(f32) for _ in range(3))
    v = np.abs(rng.standard_normal(n)).astype(f32)
    outs = []
    for _, backend in BACKENDS:
        sh = OptimizerShard(p.copy(), m.copy(), v.copy(), 7)
        for _ in range(5):
            apply_update(sh, g, OptimizerConfig(), 0.5, backend=backend)
        acc, bad = backend.sumsq_unscaled(g, f32(3.0), 0.0)
        outs.append((bits(sh.params32), bits(sh.momentum), bits(sh.variance), f32(acc), bad))
    assert outs[0] == outs[1]


def test_widen_narrow_identity_and_rounding():
    every = np.arange(65536, dtype=np.uint16).view(np.float16)
    finite = every[np.isfinite(every)]
    assert bits(narrow(widen(finite))) == bits(finite)
    # halfway between 1 and the next fp16 value rounds to the even neighbour (1.0)
    assert narrow(f32(1 + 2 ** -11)) == np.float16(1.0)
    assert narrow(f32(1 + 3 * 2 ** -11)) == np.float16(1 + 2 ** -9)


def test_check_gradients_examples():
    r = check_gradients([np.array([1.0, 2.0], np.float16)], 2.0)
    assert (r.has_nan_or_inf, r.global_sq_norm) == (False, 1.25)
    assert check_gradients([np.array([np.inf], np.float16)], 1.0).has_nan_or_inf
    assert check_gradients([np.array([np.nan], np.float16)], 1.0).has_nan_or_inf
    r = check_gradients([], 1.0)
    assert (r.has_nan_or_inf, r.global_sq_norm) == (False, 0.0)
    with pytest.raises(ContractViolation):
        check_gradients([], 0.0)


@given(st.lists(hnp.arrays(np.float16, st.integers(0, 50),
                           elements=st.floats(-100, 100, width=16)), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_norm_independent_of_arrival_order(segments, rnd):
    forward = GradCheckAccumulator(8.0, chunk=7)
    for i, s in enumerate(segments):
        forward.add(i, s)
    order = list(range(len(segments)))
    rnd.shuffle(order)
    shuffled = GradCheckAccumulator(8.0, chunk=3)
    for i in order:
        shuffled.add(i, segments[i])
    assert forward.result() == shuffled.result()
    bad, total = reference.sumsq_scalar(segments, 8.0)
    assert forward.result().global_sq_norm == float(total) and not bad


def test_clip_scale_examples():
    assert clip_scale_from_norm(4, 2) == 1.0
    assert clip_scale_from_norm(16, 2) == 0.5
    assert clip_scale_from_norm(0, 1) == 1.0
    with pytest.raises(ContractViolation):
        clip_scale_from_norm(1, 0)


def test_loss_scaler_backoff_and_growth():
    s = LossScaler(scale=8.0, growth_interval=3, min_scale=2.0)
    s.update(True)
    assert s.scale == 4.0
    for _ in range(3):
        s.update(False)
    assert s.scale == 8.0
    s.update(True), s.update(True), s.update(True)
    assert s.scale == 2.0
