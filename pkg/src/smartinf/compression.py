"""Top-K magnitude gradient compression and the chunked scatter decompressor.

Wire format (little-endian)::

    u64 block_len | u64 k | k x u32 index | k x fp16 value

Indices are block-relative and strictly increasing.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractViolation, CorruptStreamError

INDEX_WIDTH = 4
VALUE_WIDTH = 2
PAIR_BYTES = INDEX_WIDTH + VALUE_WIDTH
HEADER = struct.Struct("<QQ")

_IDX = np.dtype("<u4")
_VAL = np.dtype("<f2")


@dataclass
class SparseGradient:
    block_len: int
    indices: np.ndarray  # uint32, strictly increasing
    values: np.ndarray  # fp16

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        self.values = np.asarray(self.values, dtype=np.float16)
        if self.indices.ndim != 1 or self.indices.shape != self.values.shape:
            raise ContractViolation("indices and values must be 1-D and equally long")
        if self.k > self.block_len:
            raise ContractViolation("k exceeds block length")

    @property
    def k(self) -> int:
        return int(self.indices.shape[0])

    @property
    def wire_size(self) -> int:
        """Payload bytes: one index and one fp16 value per kept entry."""
        return self.k * PAIR_BYTES

    @property
    def record_size(self) -> int:
        return HEADER.size + self.wire_size

    def validate(self) -> None:
        idx = self.indices.astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.block_len):
            raise CorruptStreamError("index out of range")
        if idx.size > 1 and not (np.diff(idx) > 0).all():
            raise CorruptStreamError("indices not strictly increasing")

    def to_bytes(self) -> bytes:
        return (HEADER.pack(self.block_len, self.k)
                + self.indices.astype(_IDX).tobytes()
                + self.values.astype(_VAL).tobytes())

    @classmethod
    def from_bytes(cls, buf) -> "SparseGradient":
        buf = memoryview(buf)
        if len(buf) < HEADER.size:
            raise CorruptStreamError("truncated sparse header")
        block_len, k = HEADER.unpack_from(buf, 0)
        need = HEADER.size + k * PAIR_BYTES
        if len(buf) < need or k > block_len:
            raise CorruptStreamError(f"sparse record needs {need} bytes, got {len(buf)}")
        lo = HEADER.size
        idx = np.frombuffer(buf, dtype=_IDX, count=k, offset=lo)
        val = np.frombuffer(buf, dtype=_VAL, count=k, offset=lo + k * INDEX_WIDTH)
        return cls(int(block_len), idx.astype(np.uint32), val.astype(np.float16))

    def split(self, cuts) -> list:
        """Split at block-relative positions ``cuts`` into re-based pieces.

        Returns ``[(start, SparseGradient), ...]`` covering ``[0, block_len)``.
        """
        bounds = [0] + sorted(c for c in cuts if 0 < c < self.block_len) + [self.block_len]
        pieces = []
        idx = self.indices.astype(np.int64)
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            a, b = np.searchsorted(idx, [lo, hi])
            pieces.append((lo, SparseGradient(hi - lo, (idx[a:b] - lo).astype(np.uint32),
                                              self.values[a:b])))
        return pieces


def keep_count(block_len: int, keep_fraction: float) -> int:
    """Entries kept for a block: ``round(block_len * keep_fraction)``, at least one."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ContractViolation(f"keep fraction must lie in (0, 1], got {keep_fraction}")
    return max(1, min(block_len, int(math.floor(block_len * keep_fraction + 0.5))))


def keep_fraction_from_pct(compression_pct: float) -> float:
    """Kept fraction for a compression ratio counted as index+value per kept element.

    ``2%`` compression keeps the top 1% of elements.
    """
    if not 0.0 < compression_pct <= 100.0:
        raise ContractViolation("compression_pct must lie in (0, 100]")
    return compression_pct / 200.0


def compress_topk(dense, k: int) -> SparseGradient:
    dense = np.asarray(dense, dtype=np.float16)
    n = dense.shape[0]
    if not 0 < k <= n:
        raise ContractViolation(f"k={k} out of range for block of {n}")
    mag = np.abs(dense.astype(np.float32))
    # stable sort on -|x| keeps the lower index first among equal magnitudes
    order = np.argsort(-mag, kind="stable")[:k]
    order.sort()
    return SparseGradient(n, order.astype(np.uint32), dense[order])


def decompress_scatter(sg: SparseGradient, chunk: int = 64) -> np.ndarray:
    """Dense fp32 gradient of length ``block_len``; unset positions are 0.0.

    Pairs are consumed ``chunk`` at a time, as a bounded on-chip buffer would.
    """
    if chunk < 1:
        raise ContractViolation("chunk size must be >= 1")
    out = np.empty(sg.block_len, dtype=np.float32)
    status = kernels.scatter_chunks(np.ascontiguousarray(sg.indices, dtype=np.uint32),
                                    sg.values.astype(np.float32), out, int(chunk))
    if status == 1:
        raise CorruptStreamError("sparse index out of range")
    if status == 2:
        raise CorruptStreamError("duplicate sparse index")
    return out


class ErrorFeedback:
    """Optional residual accumulation: dropped mass is added back next step."""

    def __init__(self):
        self._residual: dict = {}

    def compensate(self, key, grad32: np.ndarray) -> np.ndarray:
        r = self._residual.get(key)
        return grad32 if r is None else grad32 + r

    def record(self, key, corrected32: np.ndarray, sent32: np.ndarray) -> None:
        self._residual[key] = corrected32 - sent32
