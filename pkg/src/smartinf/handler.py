"""Internal data transfer handler for near-storage updates.

A device's owned parameters are cut into subgroups that fit the
accelerator's memory; each subgroup is one tasklet (load, update,
writeback). Two schedules are provided:

``naive_pipeline``
    allocate, load, update, write back, free, one tasklet at a time.
``run_pipeline``
    buffers are allocated once for the largest subgroup. Worker 0 updates,
    writes the parameters back at once and hands the parameter and
    gradient buffers to worker 1, which starts loading the next subgroup
    while worker 0 is still writing back momentum and variance.
"""
from __future__ import annotations

import csv
import itertools
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .compression import HEADER, PAIR_BYTES, SparseGradient, decompress_scatter
from .errors import ConfigError, ContractViolation
from .fabric import Extent, Fabric
from .numerics import FP16, FP32, STATE_VARIABLES, FlatSegment, OptimizerShard

# device buffers per optimizer kind; "grad" is the fp32 gradient buffer and
# "out16" the narrowed parameter copy produced by the updater
BUFFER_BYTES = {"params32": 4, "momentum": 4, "variance": 4, "grad": 4, "out16": 2}


def buffer_kinds(optimizer_kind: str) -> tuple:
    return STATE_VARIABLES[optimizer_kind] + ("grad", "out16")


def bytes_per_element(optimizer_kind: str) -> int:
    return sum(BUFFER_BYTES[b] for b in buffer_kinds(optimizer_kind))


@dataclass
class Tasklet:
    index: int
    segment: FlatSegment
    local_offset: int
    needs: tuple
    produces: tuple
    footprint: int

    @property
    def length(self) -> int:
        return self.segment.length


def plan_subgroups(owned: FlatSegment, accel_mem_capacity: int, optimizer_kind: str) -> list:
    """Cut ``owned`` into contiguous subgroups whose buffers fit the accelerator."""
    bpe = bytes_per_element(optimizer_kind)
    per = accel_mem_capacity // bpe
    if per < 1:
        raise ConfigError(
            f"accelerator memory of {accel_mem_capacity} B cannot hold one element ({bpe} B)")
    needs = STATE_VARIABLES[optimizer_kind] + ("grad",)
    produces = STATE_VARIABLES[optimizer_kind] + ("params16",)
    out = []
    for i, lo in enumerate(range(0, owned.length, per)):
        n = min(per, owned.length - lo)
        out.append(Tasklet(i, owned.slice(owned.offset + lo, n), lo, needs, produces, n * bpe))
    return out


class Aborted(Exception):
    pass


class BufferPool:
    """Device-memory buffers with allocation accounting and ownership tokens."""

    def __init__(self, optimizer_kind: str):
        self.kinds = buffer_kinds(optimizer_kind)
        self.buffers: dict = {}
        self.allocated = 0
        self.peak = 0
        self.allocations = 0
        self._owner: dict = {}
        self._cond = threading.Condition()
        self._aborted = False

    def allocate(self, n_elems: int) -> None:
        with self._cond:
            for k in self.kinds:
                if k in self.buffers:
                    raise ContractViolation(f"buffer {k} already allocated")
                dtype = FP16 if k == "out16" else FP32
                self.buffers[k] = np.zeros(n_elems, dtype=dtype)
                self.allocated += n_elems * BUFFER_BYTES[k]
                self._owner[k] = None
            self.allocations += 1
            self.peak = max(self.peak, self.allocated)

    def free(self) -> None:
        with self._cond:
            for k in self.kinds:
                buf = self.buffers.pop(k)
                self.allocated -= buf.nbytes
            self._owner.clear()

    def acquire(self, kind: str, owner: str) -> np.ndarray:
        with self._cond:
            while self._owner[kind] not in (None, owner):
                if self._aborted:
                    raise Aborted()
                self._cond.wait()
            if self._aborted:
                raise Aborted()
            self._owner[kind] = owner
            return self.buffers[kind]

    def handoff(self, kind: str, src: str, dst: str) -> None:
        with self._cond:
            if self._owner[kind] != src:
                raise ContractViolation(f"{src} does not own buffer {kind}")
            self._owner[kind] = dst
            self._cond.notify_all()

    def release(self, kind: str, owner: str) -> None:
        self.handoff(kind, owner, None)

    def owner(self, kind: str) -> Optional[str]:
        with self._cond:
            return self._owner.get(kind)

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()


class EventLog:
    """Totally ordered per-device log driven by a monotone logical clock."""

    def __init__(self):
        self._clock = itertools.count()
        self._lock = threading.Lock()
        self.rows: list = []

    def record(self, tasklet: int, event: str, nbytes: int = 0) -> int:
        with self._lock:
            t = next(self._clock)
            self.rows.append((tasklet, event, t, nbytes))
            return t

    def times(self) -> dict:
        out: dict = {}
        for tasklet, event, t, _ in self.rows:
            out.setdefault(tasklet, {})[event] = t
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tasklet", "event", "logical_time", "bytes"])
            w.writerows(self.rows)


@dataclass
class PipelineRecord:
    mode: str
    log: EventLog
    peak_buffer_bytes: int
    preallocated_bytes: int
    allocations: int
    tasklets: list = field(default_factory=list)

    @property
    def per_tasklet(self) -> dict:
        return self.log.times()


class DeviceShard:
    """Persisted optimizer state of one CSD and its gradient landing area.

    Regions (one per fp32 state variable, plus ``grad``) are laid out in
    device-local element order. Compressed gradients land in per-piece
    slots of the ``sparse`` region, one slot list per tasklet.
    """

    def __init__(self, fabric: Fabric, dev: int, owned: FlatSegment, optimizer_kind: str):
        self.fabric = fabric
        self.dev = dev
        self.owned = owned
        self.kind = optimizer_kind
        self.variables = STATE_VARIABLES[optimizer_kind]
        store = fabric.stores[dev]
        n = owned.length
        for var in self.variables + ("grad",):
            store.allocate(var, 4 * n, dtype="fp32", segment_offset=owned.offset,
                           segment_len=n)
        self.sparse_slots: dict = {}
        self.step_count = 0
        self.decomp_chunk = 64

    def _extent(self, var: str, local_offset: int, length: int) -> Extent:
        base = self.fabric.stores[self.dev].region(var)
        return Extent(base.offset + 4 * local_offset, 4 * length)

    def provision(self, params32: np.ndarray) -> None:
        n = self.owned.length
        self.fabric.provision(self.dev, self._extent("params32", 0, n),
                              np.ascontiguousarray(params32, dtype=FP32))
        zeros = np.zeros(n, dtype=FP32)
        for var in self.variables[1:]:
            self.fabric.provision(self.dev, self._extent(var, 0, n), zeros)

    def layout_sparse(self, slots: dict) -> None:
        """``slots``: ``{tasklet_index: [(start_in_tasklet, piece_len), ...]}``."""
        total = sum(HEADER.size + PAIR_BYTES * n for pieces in slots.values() for _, n in pieces)
        base = self.fabric.stores[self.dev].allocate("sparse", total, kind="sparse-topk")
        pos = base.offset
        self.sparse_slots = {}
        for t, pieces in sorted(slots.items()):
            lst = []
            for start, n in pieces:
                cap = HEADER.size + PAIR_BYTES * n
                lst.append((start, n, Extent(pos, cap)))
                pos += cap
            self.sparse_slots[t] = lst

    # host-side (system interconnect)

    def host_write_grad(self, local_offset: int, g32: np.ndarray) -> None:
        self.fabric.host_write(self.dev, self._extent("grad", local_offset, g32.shape[0]),
                               np.ascontiguousarray(g32, dtype=FP32))

    def host_write_sparse(self, tasklet: int, piece: int, sg: SparseGradient) -> None:
        start, n, slot = self.sparse_slots[tasklet][piece]
        if sg.block_len != n:
            raise ContractViolation("sparse piece does not match its slot")
        rec = sg.to_bytes()
        self.fabric.host_write(self.dev, Extent(slot.offset, len(rec)), rec)

    def host_read_params(self, local_offset: int, length: int) -> np.ndarray:
        raw = self.fabric.host_read(self.dev, self._extent("params32", local_offset, length))
        return np.frombuffer(raw, dtype="<f4").astype(FP32)

    def host_read_state(self, var: str) -> np.ndarray:
        """Whole state variable, read directly from the backing store (no ledger)."""
        raw = self.fabric.stores[self.dev].read(self._extent(var, 0, self.owned.length))
        return np.frombuffer(raw, dtype="<f4").astype(FP32)

    # device-side (internal P2P)

    def load(self, var: str, t: Tasklet, out: np.ndarray) -> int:
        ext = self._extent(var, t.local_offset, t.length)
        out[:t.length] = np.frombuffer(self.fabric.p2p_read(self.dev, ext), dtype="<f4")
        return ext.length

    def store(self, var: str, t: Tasklet, buf: np.ndarray) -> int:
        ext = self._extent(var, t.local_offset, t.length)
        self.fabric.p2p_write(self.dev, ext, np.ascontiguousarray(buf[:t.length]))
        return ext.length

    def load_grad(self, t: Tasklet, out: np.ndarray, compressed: bool) -> int:
        if not compressed:
            return self.load("grad", t, out)
        moved = 0
        out[:t.length] = 0.0
        for start, n, slot in self.sparse_slots.get(t.index, []):
            head = self.fabric.p2p_read(self.dev, Extent(slot.offset, HEADER.size))
            _, k = HEADER.unpack(head)
            body = self.fabric.p2p_read(self.dev, Extent(slot.offset + HEADER.size, PAIR_BYTES * k))
            sg = SparseGradient.from_bytes(head + body)
            if sg.block_len != n:
                raise ContractViolation("stored sparse piece has the wrong length")
            out[start:start + n] = decompress_scatter(sg, self.decomp_chunk)
            moved += len(head) + len(body)
        return moved


UpdateFn = Callable[[OptimizerShard, np.ndarray], np.ndarray]


def _view(pool: BufferPool, t: Tasklet, scratch: np.ndarray) -> OptimizerShard:
    n = t.length
    b = pool.buffers
    # unused state of sgd/adagrad is host scratch, not device memory
    mom = b["momentum"][:n] if "momentum" in b else scratch[:n]
    var = b["variance"][:n] if "variance" in b else scratch[:n]
    return OptimizerShard(b["params32"][:n], mom, var, 0)


class _Stages:
    """The per-tasklet steps shared by both schedules."""

    def __init__(self, shard: DeviceShard, pool: BufferPool, log: EventLog,
                 update_fn: UpdateFn, compressed: bool, on_params_ready, step_count: int):
        self.shard, self.pool, self.log = shard, pool, log
        self.update_fn = update_fn
        self.compressed = compressed
        self.on_params_ready = on_params_ready
        self.step_count = step_count
        self.states = shard.variables[1:]
        self.scratch = None

    def load(self, t: Tasklet, variables) -> int:
        moved = 0
        for var in variables:
            buf = self.pool.buffers[var]
            if var == "grad":
                moved += self.shard.load_grad(t, buf, self.compressed)
            else:
                moved += self.shard.load(var, t, buf)
        return moved

    def update(self, t: Tasklet) -> None:
        if self.scratch is None or self.scratch.shape[0] < t.length:
            self.scratch = np.zeros(t.length, dtype=FP32)
        view = _view(self.pool, t, self.scratch)
        view.step_count = self.step_count
        self.log.record(t.index, "update_start", t.length)
        out16 = self.update_fn(view, self.pool.buffers["grad"][:t.length])
        self.pool.buffers["out16"][:t.length] = out16
        self.log.record(t.index, "update_end", t.length)

    def params_writeback(self, t: Tasklet) -> None:
        self.log.record(t.index, "params_wb_start")
        n = self.shard.store("params32", t, self.pool.buffers["params32"])
        self.log.record(t.index, "params_wb_end", n)

    def params_ready(self, t: Tasklet) -> None:
        if self.on_params_ready is not None:
            self.on_params_ready(self.shard, t)

    def state_writeback(self, t: Tasklet, owner: Optional[str] = None) -> None:
        self.log.record(t.index, "state_wb_start")
        n = 0
        for var in self.states:
            n += self.shard.store(var, t, self.pool.buffers[var])
            if owner is not None:
                self.pool.release(var, owner)
        self.log.record(t.index, "state_wb_end", n)


def naive_pipeline(tasklets, update_fn: UpdateFn, shard: DeviceShard, *, compressed=False,
                   on_params_ready=None, log: Optional[EventLog] = None) -> PipelineRecord:
    """Reference schedule: each tasklet allocates, loads, updates, writes back, frees."""
    log = log or EventLog()
    pool = BufferPool(shard.kind)
    st = _Stages(shard, pool, log, update_fn, compressed, on_params_ready, shard.step_count)
    for t in tasklets:
        pool.allocate(t.length)
        log.record(t.index, "alloc", t.footprint)
        try:
            log.record(t.index, "load_start")
            n = st.load(t, st.shard.variables + ("grad",))
            log.record(t.index, "load_end", n)
            st.update(t)
            st.params_writeback(t)
            st.params_ready(t)
            st.state_writeback(t)
        finally:
            pool.free()
            log.record(t.index, "dealloc", t.footprint)
    shard.step_count += 1
    return PipelineRecord("naive", log, pool.peak, 0, pool.allocations, list(tasklets))


def run_pipeline(tasklets, update_fn: UpdateFn, shard: DeviceShard, *, compressed=False,
                 on_params_ready=None, threaded: bool = True,
                 log: Optional[EventLog] = None) -> PipelineRecord:
    """Optimised schedule with preallocated buffers and deferred state writeback.

    ``threaded=False`` runs the same schedule in one fixed interleaving,
    which is what the deterministic mode uses.
    """
    tasklets = list(tasklets)
    log = log or EventLog()
    pool = BufferPool(shard.kind)
    if tasklets:
        pool.allocate(max(t.length for t in tasklets))
    prealloc = pool.allocated
    st = _Stages(shard, pool, log, update_fn, compressed, on_params_ready, shard.step_count)
    urgent = ("params32", "grad")
    if threaded and len(tasklets) > 1:
        _run_threaded(tasklets, st, pool, urgent)
    else:
        _run_inline(tasklets, st, urgent)
    if pool.allocated != prealloc:
        raise ContractViolation("device buffers were reallocated during the pipeline")
    shard.step_count += 1
    return PipelineRecord("optimized", log, pool.peak, prealloc, pool.allocations, tasklets)


def _run_inline(tasklets, st: _Stages, urgent) -> None:
    log = st.log
    if not tasklets:
        return
    first = tasklets[0]
    log.record(first.index, "load_start")
    n = st.load(first, st.shard.variables + ("grad",))
    log.record(first.index, "load_end", n)
    for i, t in enumerate(tasklets):
        nxt = tasklets[i + 1] if i + 1 < len(tasklets) else None
        st.update(t)
        st.params_writeback(t)
        log.record(t.index, "signal")
        if nxt is not None:
            log.record(nxt.index, "load_start")
            n = st.load(nxt, urgent)
        st.params_ready(t)
        st.state_writeback(t)
        if nxt is not None:
            n += st.load(nxt, st.states)
            log.record(nxt.index, "load_end", n)


def _run_threaded(tasklets, st: _Stages, pool: BufferPool, urgent) -> None:
    log = st.log
    ready: queue.Queue = queue.Queue()
    errors: list = []
    order = urgent + st.states

    def loader():  # worker 1
        try:
            for t in tasklets:
                log.record(t.index, "load_start")
                n = 0
                for var in order:
                    pool.acquire(var, "w1")
                    n += st.load(t, (var,))
                log.record(t.index, "load_end", n)
                for var in order:
                    pool.handoff(var, "w1", "w0")
                ready.put(t)
        except Aborted:
            pass
        except BaseException as exc:  # surfaced by the caller
            errors.append(exc)
            pool.abort()
            ready.put(None)

    def updater():  # worker 0
        try:
            for _ in tasklets:
                t = ready.get()
                if t is None:
                    return
                st.update(t)
                st.params_writeback(t)
                pool.release("params32", "w0")
                pool.release("grad", "w0")
                log.record(t.index, "signal")
                st.params_ready(t)
                st.state_writeback(t, owner="w0")
        except BaseException as exc:
            errors.append(exc)
            pool.abort()

    w1 = threading.Thread(target=loader, name="handler-w1")
    w0 = threading.Thread(target=updater, name="handler-w0")
    w1.start()
    w0.start()
    w0.join()
    w1.join()
    if errors:
        raise errors[0]
