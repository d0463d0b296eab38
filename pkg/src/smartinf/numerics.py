"""Flat-tensor arithmetic for mixed-precision optimizer updates.

The updater is built from AXPBY-style moving averages over fp32 state
(master parameters, momentum, variance). All arithmetic is single precision
with a fixed operation order, so the same update gives bit-identical results
whether it runs on the host, on a simulated near-storage accelerator, or
subgroup by subgroup.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import kernels
from .errors import ContractViolation, SkippedStep

FP16 = np.float16
FP32 = np.float32

OPTIMIZER_KINDS = ("adam", "sgd_momentum", "adagrad")

# fp32 state arrays each optimizer kind actually reads and writes
STATE_VARIABLES = {
    "adam": ("params32", "momentum", "variance"),
    "sgd_momentum": ("params32", "momentum"),
    "adagrad": ("params32", "variance"),
}


def widen(x) -> np.ndarray:
    return np.asarray(x, dtype=FP16).astype(FP32)


def narrow(x) -> np.ndarray:
    """fp32 -> fp16 with IEEE round-to-nearest-even (numpy's cast mode).

    Values beyond the fp16 range become +-inf, which the gradient gate
    then reports as an overflow.
    """
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=FP32).astype(FP16)


@dataclass
class FlatSegment:
    """A contiguous run ``[offset, offset + length)`` of the flattened parameters."""

    offset: int
    length: int
    dtype: str = "fp16"
    data: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.length <= 0:
            raise ContractViolation(f"segment length must be positive, got {self.length}")
        if self.offset < 0:
            raise ContractViolation(f"segment offset must be >= 0, got {self.offset}")
        if self.dtype not in ("fp16", "fp32"):
            raise ContractViolation(f"unknown dtype {self.dtype!r}")
        if self.data is not None and self.data.shape != (self.length,):
            raise ContractViolation("segment data does not match its length")

    @property
    def stop(self) -> int:
        return self.offset + self.length

    def check_within(self, n_total: int) -> None:
        if self.stop > n_total:
            raise ContractViolation(f"segment [{self.offset}, {self.stop}) exceeds N={n_total}")

    def slice(self, offset: int, length: int) -> "FlatSegment":
        """Sub-segment with a global ``offset``."""
        if offset < self.offset or offset + length > self.stop:
            raise ContractViolation("sub-segment outside parent segment")
        data = None
        if self.data is not None:
            lo = offset - self.offset
            data = self.data[lo:lo + length]
        return FlatSegment(offset, length, self.dtype, data)


@dataclass
class OptimizerShard:
    params32: np.ndarray
    momentum: np.ndarray
    variance: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        n = self.params32.shape
        if self.momentum.shape != n or self.variance.shape != n:
            raise ContractViolation("optimizer state arrays must share one length")
        for name in ("params32", "momentum", "variance"):
            if getattr(self, name).dtype != FP32:
                raise ContractViolation(f"{name} must be fp32")

    @classmethod
    def from_params(cls, params32) -> "OptimizerShard":
        p = np.array(params32, dtype=FP32)
        return cls(p, np.zeros_like(p), np.zeros_like(p))

    def __len__(self) -> int:
        return self.params32.shape[0]

    @property
    def nbytes(self) -> int:
        # 3 fp32 variables per parameter: 6M with M = 2 * len
        return 3 * 4 * len(self)

    def copy(self) -> "OptimizerShard":
        return OptimizerShard(self.params32.copy(), self.momentum.copy(),
                              self.variance.copy(), self.step_count)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum_coef: float = 0.9
    bias_correction: bool = True

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ContractViolation(f"unknown optimizer kind {self.kind!r}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ContractViolation("beta1 and beta2 must lie in [0, 1)")
        if not 0.0 <= self.momentum_coef < 1.0:
            raise ContractViolation("momentum_coef must lie in [0, 1)")
        if not self.eps > 0.0:
            raise ContractViolation("eps must be positive")

    @property
    def state_variables(self) -> tuple:
        return STATE_VARIABLES[self.kind]


def adam_coefficients(cfg: OptimizerConfig, step: int) -> dict:
    """fp32 scalars fed to the Adam kernel for 1-based ``step``.

    ``1 - beta`` is an fp32 subtraction; the bias corrections are evaluated
    in double precision and rounded once to fp32.
    """
    beta1 = FP32(cfg.beta1)
    beta2 = FP32(cfg.beta2)
    return dict(
        beta1=beta1,
        omb1=FP32(1.0) - beta1,
        beta2=beta2,
        omb2=FP32(1.0) - beta2,
        bc1=FP32(1.0 - float(beta1) ** step),
        bc2=FP32(1.0 - float(beta2) ** step),
        lr=FP32(cfg.lr),
        eps=FP32(cfg.eps),
    )


def axpby(alpha, a, beta, b) -> np.ndarray:
    """Elementwise ``alpha * a + beta * b`` in fp32; inputs are not modified."""
    a = np.ascontiguousarray(a, dtype=FP32)
    b = np.ascontiguousarray(b, dtype=FP32)
    if a.shape != b.shape:
        raise ContractViolation(f"axpby length mismatch: {a.shape} vs {b.shape}")
    out = np.empty_like(a)
    kernels.axpby(FP32(alpha), a, FP32(beta), b, out)
    return out


def apply_update(shard: OptimizerShard, grad, cfg: OptimizerConfig,
                 clip_scale: float = 1.0, backend=None) -> np.ndarray:
    """Run one optimizer step on ``shard`` in place and return fp16 params.

    ``grad`` must already be unscaled (loss scaling removed). Non-finite
    gradients raise :class:`SkippedStep` and leave the shard untouched.
    """
    k = backend or kernels
    grad = np.ascontiguousarray(grad, dtype=FP32)
    if grad.shape != shard.params32.shape:
        raise ContractViolation(
            f"gradient length {grad.shape} does not match shard {shard.params32.shape}")
    if not 0.0 < clip_scale <= 1.0:
        raise ContractViolation(f"clip_scale must lie in (0, 1], got {clip_scale}")
    if not np.isfinite(grad).all():
        raise SkippedStep("non-finite gradient")

    clip = FP32(clip_scale)
    step = shard.step_count + 1
    if cfg.kind == "adam":
        c = adam_coefficients(cfg, step)
        k.adam_step(shard.params32, shard.momentum, shard.variance, grad, clip,
                    c["beta1"], c["omb1"], c["beta2"], c["omb2"], c["bc1"], c["bc2"],
                    c["lr"], c["eps"], cfg.bias_correction)
    elif cfg.kind == "sgd_momentum":
        k.sgd_momentum_step(shard.params32, shard.momentum, grad, clip,
                            FP32(cfg.momentum_coef), FP32(cfg.lr))
    else:
        k.adagrad_step(shard.params32, shard.variance, grad, clip, FP32(cfg.lr),
                       FP32(cfg.eps))
    shard.step_count = step
    return narrow(shard.params32)


@dataclass
class GradCheckResult:
    has_nan_or_inf: bool
    global_sq_norm: float


class GradCheckAccumulator:
    """Streaming NaN/Inf and squared-norm check over gradient segments.

    Each segment is reduced sequentially in fp32; segment partials are then
    summed in segment-index order, so the result does not depend on the
    order in which segments arrive.
    """

    def __init__(self, loss_scale: float, chunk: int = 1 << 16):
        if not loss_scale > 0:
            raise ContractViolation("loss_scale must be positive")
        self.loss_scale = FP32(loss_scale)
        self.chunk = chunk
        self._partials: dict = {}
        self._bad = False

    def add(self, index: int, grads16) -> None:
        if index in self._partials:
            raise ContractViolation(f"segment {index} already accumulated")
        g = np.asarray(grads16, dtype=FP16)
        acc = 0.0
        for lo in range(0, g.shape[0], self.chunk):
            part = g[lo:lo + self.chunk].astype(FP32)
            acc, bad = kernels.sumsq_unscaled(part, self.loss_scale, acc)
            self._bad |= bad
        self._partials[index] = FP32(acc)

    def result(self) -> GradCheckResult:
        if self._bad:
            return GradCheckResult(True, float("inf"))
        total = FP32(0.0)
        for index in sorted(self._partials):
            total = FP32(total + self._partials[index])
        return GradCheckResult(False, float(total))


def check_gradients(grads: Iterable, loss_scale: float) -> GradCheckResult:
    """Single pass over fp16 gradient segments: NaN/Inf flag and fp32 sum of squares."""
    acc = GradCheckAccumulator(loss_scale)
    for i, seg in enumerate(grads):
        acc.add(i, seg)
    return acc.result()


def clip_scale_from_norm(global_sq_norm: float, max_norm: float) -> float:
    """Gradient clipping factor ``min(1, max_norm / ||g||)`` in fp32."""
    if global_sq_norm < 0 or not max_norm > 0:
        raise ContractViolation("need global_sq_norm >= 0 and max_norm > 0")
    norm = np.sqrt(FP32(global_sq_norm))
    max_norm = FP32(max_norm)
    if norm <= max_norm:
        return 1.0
    return float(max_norm / norm)


@dataclass
class LossScaler:
    """Dynamic loss scaling: back off on overflow, grow after a run of good steps."""

    scale: float = 2.0 ** 12
    factor: float = 2.0
    growth_interval: int = 100
    min_scale: float = 1.0
    good_steps: int = field(default=0)

    def update(self, overflow: bool) -> None:
        if overflow:
            self.scale = max(self.min_scale, self.scale / self.factor)
            self.good_steps = 0
            return
        self.good_steps += 1
        if self.good_steps % self.growth_interval == 0:
            self.scale *= self.factor
