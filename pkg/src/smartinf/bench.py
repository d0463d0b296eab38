"""Timing of the compiled kernels against the numpy fallback."""
from __future__ import annotations

import timeit

import numpy as np

from . import kernels
from .numerics import FP32, OptimizerConfig, adam_coefficients


def _cases(size: int, rng):
    p = rng.standard_normal(size).astype(FP32)
    m = rng.standard_normal(size).astype(FP32)
    v = np.abs(rng.standard_normal(size)).astype(FP32)
    g = rng.standard_normal(size).astype(FP32)
    c = adam_coefficients(OptimizerConfig(), 1)
    k = max(1, size // 100)
    idx = np.sort(rng.choice(size, k, replace=False)).astype(np.uint32)
    val = rng.standard_normal(k).astype(FP32)
    out = np.empty(size, FP32)
    return {
        "axpby": lambda b: b.axpby(FP32(0.9), m, FP32(0.1), g, out),
        "adam_step": lambda b: b.adam_step(p, m, v, g, FP32(1), c["beta1"], c["omb1"],
                                           c["beta2"], c["omb2"], c["bc1"], c["bc2"],
                                           c["lr"], c["eps"], True),
        "sgd_momentum_step": lambda b: b.sgd_momentum_step(p, m, g, FP32(1), FP32(0.9),
                                                           FP32(1e-3)),
        "adagrad_step": lambda b: b.adagrad_step(p, v, g, FP32(1), FP32(1e-3), FP32(1e-8)),
        "sumsq_unscaled": lambda b: b.sumsq_unscaled(g, FP32(1024), 0.0),
        "scatter_chunks(1%)": lambda b: b.scatter_chunks(idx, val, out, 64),
    }


def run_benchmarks(size: int = 1 << 20, repeat: int = 5, seed: int = 0) -> list:
    """Rows of ``(kernel, backend, best_seconds, elements_per_second)``."""
    rng = np.random.default_rng(seed)
    cases = _cases(size, rng)
    rows = []
    for name, fn in cases.items():
        for backend_name, backend in sorted(kernels.available_backends().items()):
            best = min(timeit.repeat(lambda: fn(backend), number=1, repeat=repeat))
            rows.append((name, backend_name, best, size / best))
    return rows


def format_results(rows) -> str:
    lines = [f"{'kernel':<20} {'backend':<9} {'best ms':>9} {'Melem/s':>10} {'speedup':>8}"]
    base = {n: t for n, b, t, _ in rows if b == "numpy"}
    for name, backend, t, rate in rows:
        lines.append(f"{name:<20} {backend:<9} {t * 1e3:9.3f} {rate / 1e6:10.1f} "
                     f"{base[name] / t:8.2f}x")
    return "\n".join(lines)
