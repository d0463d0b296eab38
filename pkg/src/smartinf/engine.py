"""Training engine: forward, backward with gradient offload, gate, update.

Modes
-----
``memory``  optimizer state in host memory, no devices (the reference)
``base``    states on a RAID0 volume of plain SSDs, updated by the host
``su``      states on CSDs, updated on device, naive transfer handler
``su_o``    as ``su`` with the optimised transfer handler
``su_o_c``  as ``su_o`` with Top-K compressed gradients

The "GPU" is simulated on the host: it computes in fp32 from the fp16
parameters and hands back loss-scaled fp16 gradients, block by block.
"""
from __future__ import annotations

import csv
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .compression import ErrorFeedback, compress_topk, keep_count, keep_fraction_from_pct
from .errors import ConfigError, ContractViolation
from .fabric import Fabric, FabricTopology, Raid0Volume, TrafficLedger
from .handler import DeviceShard, naive_pipeline, plan_subgroups, run_pipeline
from .numerics import (FP32, STATE_VARIABLES, FlatSegment, GradCheckAccumulator,
                       LossScaler, OptimizerConfig, OptimizerShard, apply_update,
                       clip_scale_from_norm, narrow)

MODES = ("memory", "base", "su", "su_o", "su_o_c")


class ToyModel:
    """Fully connected tanh network with a linear head.

    Flattened order: for each layer, the weight matrix (row-major,
    ``out x in``) followed by its bias. Each layer is one offload block.
    """

    def __init__(self, sizes=(255, 255, 1)):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigError("need at least an input and an output width")
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = [(o, i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]
        self.block_sizes = [o * i + o for o, i in self.shapes]
        self.block_offsets = list(np.cumsum([0] + self.block_sizes[:-1]))
        self.n_params = int(sum(self.block_sizes))

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        parts = []
        for o, i in self.shapes:
            parts.append(rng.uniform(-1, 1, size=o * i) / np.sqrt(i))
            parts.append(np.zeros(o))
        return narrow(np.concatenate(parts).astype(FP32))

    def _unpack(self, params32: np.ndarray):
        layers = []
        for (o, i), off in zip(self.shapes, self.block_offsets):
            w = params32[off:off + o * i].reshape(o, i)
            b = params32[off + o * i:off + o * i + o]
            layers.append((w, b))
        return layers

    def forward(self, params16: np.ndarray, x: np.ndarray, keep=False):
        layers = self._unpack(params16.astype(FP32))
        acts = [x]
        h = x
        for j, (w, b) in enumerate(layers):
            z = h @ w.T + b
            h = np.tanh(z) if j < len(layers) - 1 else z
            acts.append(h)
        return (h, acts, layers) if keep else h

    @staticmethod
    def loss(pred: np.ndarray, y: np.ndarray) -> FP32:
        r = pred - y
        return FP32(0.5) * FP32(np.mean(r * r, dtype=FP32))

    def backward(self, params16: np.ndarray, x: np.ndarray, y: np.ndarray):
        """Loss and per-block fp32 gradients, last block first (backprop order)."""
        pred, acts, layers = self.forward(params16, x, keep=True)
        loss = self.loss(pred, y)
        delta = (pred - y) / FP32(x.shape[0])
        out = []
        for j in range(len(layers) - 1, -1, -1):
            w, _ = layers[j]
            gw = delta.T @ acts[j]
            gb = delta.sum(axis=0)
            out.append((j, np.concatenate([gw.ravel(), gb]).astype(FP32)))
            if j > 0:
                delta = (delta @ w) * (FP32(1) - acts[j] * acts[j])
        return loss, out


class Dataset:
    """Synthetic regression: a random teacher network plus Gaussian label noise."""

    def __init__(self, model: ToyModel, seed: int, n_train=16384, n_eval=1024,
                 noise=0.2, batch=256, teacher_scale=1.5):
        rng = np.random.default_rng(seed + 1)
        teacher = ToyModel(model.sizes)
        tp = teacher.init_params(seed + 2).astype(FP32) * FP32(teacher_scale)
        d = model.sizes[0]
        self.x = rng.standard_normal((n_train, d)).astype(FP32)
        self.x_eval = rng.standard_normal((n_eval, d)).astype(FP32)
        t16 = narrow(tp)
        self.y = (teacher.forward(t16, self.x) + noise * rng.standard_normal((n_train, 1))).astype(FP32)
        self.y_eval = (teacher.forward(t16, self.x_eval)
                       + noise * rng.standard_normal((n_eval, 1))).astype(FP32)
        self.batch = batch
        self._rng = np.random.default_rng(seed + 3)

    def next_batch(self):
        idx = self._rng.integers(0, self.x.shape[0], size=self.batch)
        return self.x[idx], self.y[idx]


def partition_parameters(n_params: int, device_count: int) -> list:
    """Balanced contiguous split of ``[0, n_params)``: ``[(device_id, FlatSegment), ...]``."""
    if device_count < 1:
        raise ConfigError("device_count must be >= 1")
    if n_params < device_count:
        raise ConfigError("fewer parameters than devices")
    base, extra = divmod(n_params, device_count)
    out, pos = [], 0
    for d in range(device_count):
        n = base + (1 if d < extra else 0)
        out.append((d, FlatSegment(pos, n, "fp32")))
        pos += n
    return out


def split_at(lo: int, n: int, cuts) -> list:
    """``[(start, length), ...]`` pieces of ``[lo, lo + n)`` cut at global positions."""
    out, pos, stop = [], lo, lo + n
    for c in sorted(cuts):
        if pos < c < stop:
            out.append((pos, c - pos))
            pos = c
    out.append((pos, stop - pos))
    return out


@dataclass
class EngineConfig:
    mode: str = "su_o"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model_sizes: tuple = (255, 255, 1)
    seed: int = 0
    compression_pct: Optional[float] = None
    max_grad_norm: float = 1.0
    initial_loss_scale: float = 2.0 ** 12
    deterministic: bool = False
    error_feedback: bool = False
    raid_stripe: int = 4096
    decomp_chunk: int = 64
    batch_size: int = 256
    label_noise: float = 0.2
    teacher_scale: float = 1.5
    n_train: int = 16384

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "su_o_c":
            if self.compression_pct is None:
                raise ConfigError("mode su_o_c needs compression_pct")
            if not 0 < self.compression_pct <= 100:
                raise ConfigError("compression_pct must lie in (0, 100]")
        elif self.compression_pct is not None:
            raise ConfigError("compression_pct is only valid for mode su_o_c")
        if not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be positive")


@dataclass
class IterationReport:
    step: int
    loss: float
    skipped: bool
    loss_scale: float
    clip_scale: float
    grad_sq_norm: float
    traffic: dict
    kept_pairs: int = 0
    phase_seconds: dict = field(default_factory=dict)

    @property
    def nominal_comp_bytes(self) -> int:
        """Compressed-gradient volume at 4 B index + 4 B value per kept entry."""
        return 8 * self.kept_pairs


class Engine:
    def __init__(self, cfg: EngineConfig, topology: Optional[FabricTopology] = None,
                 workdir=None):
        cfg.validate()
        self.cfg = cfg
        self.model = ToyModel(cfg.model_sizes)
        self.data = Dataset(self.model, cfg.seed, n_train=cfg.n_train, noise=cfg.label_noise,
                            batch=cfg.batch_size, teacher_scale=cfg.teacher_scale)
        self.ledger = TrafficLedger()
        self.scaler = LossScaler(scale=cfg.initial_loss_scale)
        self.params16 = self.model.init_params(cfg.seed)
        self.step = 0
        self.logs: list = []
        self._tmp = None
        self.variables = STATE_VARIABLES[cfg.optimizer.kind]
        blocks = list(zip(range(len(self.model.block_sizes)), self.model.block_offsets,
                          self.model.block_sizes))
        self.blocks = [(i, int(lo), int(size)) for i, lo, size in blocks]

        if cfg.mode == "memory":
            self.host_state = OptimizerShard.from_params(self.params16.astype(FP32))
            self.fabric = None
            return
        if topology is None:
            topology = FabricTopology.uniform(1)
        kind = "ssd" if cfg.mode == "base" else "csd"
        self.topology = topology.with_kind(kind)
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="smartinf-")
            workdir = self._tmp.name
        self.fabric = Fabric(self.topology, workdir, self.ledger)
        p32 = self.params16.astype(FP32)
        if cfg.mode == "base":
            self._init_base(p32)
        else:
            self._init_csd(p32)

    # setup

    def _init_base(self, p32):
        k = len(self.variables) + 1  # states plus the fp32 gradient
        total = 4 * k * self.model.n_params
        ids = range(len(self.topology.devices))
        self.volume = Raid0Volume(self.fabric, ids, self.cfg.raid_stripe, total)
        self.base_extents = {}
        for i, lo, size in self.blocks:
            ext = self.volume.allocate(f"block{i}", 4 * k * size)
            self.base_extents[i] = ext
            state =np.concatenate([p32[lo:lo + size]] + [np.zeros(size, FP32)] * (k - 1))
            self.volume.provision(ext.offset, state)

    def _init_csd(self, p32):
        cfg = self.cfg
        n_dev = len(self.topology.devices)
        self.partition = partition_parameters(self.model.n_params, n_dev)
        self.shards, self.tasklets = [], []
        for dev, seg in self.partition:
            shard = DeviceShard(self.fabric, dev, seg, cfg.optimizer.kind)
            shard.decomp_chunk = cfg.decomp_chunk
            shard.provision(p32[seg.offset:seg.stop])
            self.shards.append(shard)
            cap = self.topology.devices[dev].accel_mem_capacity
            self.tasklets.append(plan_subgroups(seg, cap, cfg.optimizer.kind))
        self.dev_cuts = [seg.offset for _, seg in self.partition]
        self.sub_cuts = [t.segment.offset for ts in self.tasklets for t in ts]
        if cfg.mode == "su_o_c":
            self.keep_fraction = keep_fraction_from_pct(cfg.compression_pct)
            self.feedback = ErrorFeedback() if cfg.error_feedback else None
            # block -> [(block-relative cut, dev, tasklet, piece)], and per-device slots
            self.sparse_route = {}
            slots = [dict() for _ in self.shards]
            for i, lo, size in self.blocks:
                route = []
                for start, n in split_at(lo, size, self.sub_cuts):
                    dev = self._owner(start)
                    t = self._tasklet_of(dev, start)
                    rel = start - t.segment.offset
                    pieces = slots[dev].setdefault(t.index, [])
                    route.append((start - lo, dev, t.index, len(pieces)))
                    pieces.append((rel, n))
                self.sparse_route[i] = route
            for shard, s in zip(self.shards, slots):
                shard.layout_sparse(s)

    def _owner(self, x: int) -> int:
        return int(np.searchsorted(self.dev_cuts, x, side="right")) - 1

    def _tasklet_of(self, dev: int, x: int):
        ts = self.tasklets[dev]
        starts = [t.segment.offset for t in ts]
        return ts[int(np.searchsorted(starts, x, side="right")) - 1]

    def close(self) -> None:
        if self.fabric is not None:
            self.fabric.close()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # one iteration

    def eval_loss(self) -> float:
        pred = self.model.forward(self.params16, self.data.x_eval)
        return float(self.model.loss(pred, self.data.y_eval))

    def train_step(self, batch=None) -> IterationReport:
        x, y = batch if batch is not None else self.data.next_batch()
        snap = self.ledger.snapshot()
        scale = FP32(self.scaler.scale)
        with self.ledger.phase("forward"):
            self.model.forward(self.params16, x)  # activations are recomputed below
        with self.ledger.phase("backward_grad_offload"):
            loss, grads = self.model.backward(self.params16, x, y)
            gate = GradCheckAccumulator(scale)
            kept = 0
            pending = {}
            for i, g32 in grads:
                g16 = narrow(g32 * scale)
                gate.add(i, g16)
                kept += self.offload_gradients(i, g16, scale, pending)
        check = gate.result()
        if check.has_nan_or_inf:
            self.scaler.update(True)
            return self._report(loss, True, float(scale), 1.0, check.global_sq_norm, snap, kept)
        clip = clip_scale_from_norm(check.global_sq_norm, self.cfg.max_grad_norm)
        with self.ledger.phase("update"):
            self._update(pending, clip, scale)
        self.step += 1
        self.scaler.update(False)
        return self._report(loss, False, float(scale), clip, check.global_sq_norm, snap, kept)

    def _report(self, loss, skipped, scale, clip, sq, snap, kept):
        traffic = TrafficLedger.summarize(self.ledger.since(snap))
        return IterationReport(self.step, float(loss), skipped, scale, clip, float(sq),
                               traffic, kept)

    def offload_gradients(self, block: int, g16: np.ndarray, scale, pending: dict) -> int:
        """Send one block's gradients to where its update will run.

        Dense modes unscale to fp32 on the host and write each partition's
        share separately. The compressed mode sends Top-K records of the
        still-scaled fp16 values; the device unscales after decompression.
        Returns the number of kept (index, value) pairs.
        """
        mode = self.cfg.mode
        _, lo, size = self.blocks[block]
        if g16.shape != (size,):
            raise ContractViolation(f"gradient of block {block} has the wrong length")
        if mode == "su_o_c":
            return self._offload_sparse(block, g16, scale)
        g32 = g16.astype(FP32) / scale
        if mode == "memory":
            pending[block] = g32
        elif mode == "base":
            ext = self.base_extents[block]
            nv = len(self.variables)
            self.volume.write(ext.offset + 4 * nv * size, g32)
        else:
            for start, n in split_at(lo, size, self.dev_cuts):
                dev = self._owner(start)
                shard = self.shards[dev]
                shard.host_write_grad(start - shard.owned.offset, g32[start - lo:start - lo + n])
        return 0

    def _offload_sparse(self, block: int, g16: np.ndarray, scale) -> int:
        _, lo, size = self.blocks[block]
        k = keep_count(size, self.keep_fraction)
        if self.feedback is not None:
            corrected = self.feedback.compensate(block, g16.astype(FP32) / scale)
            send16 = narrow(corrected * scale)
        else:
            send16 = g16
        sg = compress_topk(send16, k)
        if self.feedback is not None:
            sent = np.zeros(size, FP32)
            sent[sg.indices] = sg.values.astype(FP32) / scale
            self.feedback.record(block, corrected, sent)
        route = self.sparse_route[block]
        cuts = [rel for rel, *_ in route]
        for (start, piece), (_, dev, t, j) in zip(sg.split(cuts), route):
            self.shards[dev].host_write_sparse(t, j, piece)
        return sg.k

    def _update(self, pending: dict, clip: float, scale) -> None:
        cfg = self.cfg
        opt = cfg.optimizer
        if cfg.mode == "memory":
            for i, lo, size in self.blocks:
                st = self.host_state
                view = OptimizerShard(st.params32[lo:lo + size], st.momentum[lo:lo + size],
                                      st.variance[lo:lo + size], self.step)
                self.params16[lo:lo + size] = apply_update(view, pending[i], opt, clip)
            return
        if cfg.mode == "base":
            self._update_base(clip)
            return

        compressed = cfg.mode == "su_o_c"

        def update_fn(view, grad):
            if compressed:
                grad = grad / scale
            return apply_update(view, grad, opt, clip)

        def on_params_ready(shard, t):
            p32 = shard.host_read_params(t.local_offset, t.length)
            lo = t.segment.offset
            self.params16[lo:lo + t.length] = narrow(p32)

        records = [None] * len(self.shards)
        errors = []

        def run(d):
            shard = self.shards[d]
            if shard.step_count != self.step:
                raise ContractViolation("device step count diverged from the engine")
            kw = dict(compressed=compressed, on_params_ready=on_params_ready)
            try:
                if cfg.mode == "su":
                    records[d] = naive_pipeline(self.tasklets[d], update_fn, shard, **kw)
                else:
                    records[d] = run_pipeline(self.tasklets[d], update_fn, shard,
                                              threaded=not cfg.deterministic, **kw)
            except BaseException as exc:
                errors.append(exc)

        if cfg.deterministic or len(self.shards) == 1:
            for d in range(len(self.shards)):
                run(d)
        else:
            workers = [threading.Thread(target=run, args=(d,)) for d in range(len(self.shards))]
            for w in workers:
                w.start()
            for w in workers:
                w.join()
        if errors:
            raise errors[0]
        self.logs = records

    def _update_base(self, clip: float) -> None:
        """Host update, block by block: read states and gradient, update, write states."""
        nv = len(self.variables)
        for i, lo, size in self.blocks:
            ext = self.base_extents[i]
            raw = np.frombuffer(self.volume.read(ext.offset, ext.length), dtype="<f4")
            arrs = {v: raw[j * size:(j + 1) * size].astype(FP32) for j, v in enumerate(self.variables)}
            grad = raw[nv * size:(nv + 1) * size].astype(FP32)
            p = arrs["params32"]
            scratch = np.zeros(size, FP32)
            view = OptimizerShard(p, arrs.get("momentum", scratch), arrs.get("variance", scratch),
                                  self.step)
            self.params16[lo:lo + size] = apply_update(view, grad, self.cfg.optimizer, clip)
            self.volume.write(ext.offset, np.concatenate([arrs[v] for v in self.variables]))

    # state inspection (no ledger traffic)

    def master_state(self) -> dict:
        """Full fp32 optimizer state, gathered without touching the ledger."""
        n = self.model.n_params
        out = {v: np.zeros(n, FP32) for v in self.variables}
        if self.cfg.mode == "memory":
            st = self.host_state
            for v in self.variables:
                out[v][:] = getattr(st, v)
        elif self.cfg.mode == "base":
            nv = len(self.variables)
            for i, lo, size in self.blocks:
                ext = self.base_extents[i]
                raw = bytearray()
                for dev, dext, _ in self.volume._pieces(ext.offset, 4 * nv * size):
                    raw += self.fabric.stores[dev].read(dext)
                arr = np.frombuffer(bytes(raw), dtype="<f4")
                for j, v in enumerate(self.variables):
                    out[v][lo:lo + size] = arr[j * size:(j + 1) * size]
        else:
            for shard in self.shards:
                seg = shard.owned
                for v in self.variables:
                    out[v][seg.offset:seg.stop] = shard.host_read_state(v)
        return out


def run_experiment(cfg: EngineConfig, steps: int, topology: Optional[FabricTopology] = None,
                   workdir=None, eval_every: int = 0):
    """Train for ``steps`` iterations; returns ``(reports, aggregate)``."""
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    reports = []
    with Engine(cfg, topology, workdir) as eng:
        for _ in range(steps):
            reports.append(eng.train_step())
        final_eval = eng.eval_loss() if steps else None
        final_params = eng.params16.copy()
    agg = aggregate(reports)
    agg["final_eval_loss"] = final_eval
    agg["final_params"] = final_params
    return reports, agg


def aggregate(reports) -> dict:
    keys = sorted({k for r in reports for k in r.traffic})
    out = {"steps": len(reports), "skipped": sum(r.skipped for r in reports)}
    for k in keys:
        out[k] = sum(r.traffic.get(k, 0) for r in reports)
    out["final_loss"] = reports[-1].loss if reports else None
    return out


REPORT_COLUMNS = ["step", "loss", "skipped", "loss_scale", "clip_scale", "grad_sq_norm",
                  "host_read", "host_write", "host_read_update", "host_write_backward_grad_offload",
                  "internal_read", "internal_write", "kept_pairs", "nominal_comp_bytes"]


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            t = r.traffic
            w.writerow([r.step, repr(r.loss), int(r.skipped), r.loss_scale, repr(r.clip_scale),
                        repr(r.grad_sq_norm), t["host_read"], t["host_write"],
                        t["host_read_update"], t["host_write_backward_grad_offload"],
                        t["internal_read"], t["internal_write"], r.kept_pairs,
                        r.nominal_comp_bytes])


def write_aggregate_csv(agg: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k in sorted(agg):
            if k == "final_params":
                continue
            w.writerow([k, agg[k]])
