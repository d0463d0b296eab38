"""Discrete-event timing model for storage-offloaded training.

A trace is an ordered list of :class:`TraceOp`. Each op occupies one
resource for ``latency + bytes / bandwidth`` seconds (or an explicit
``duration``) and may depend on earlier ops. Scheduling is FIFO list
scheduling in trace order: an op starts once its resource is free and its
dependencies have ended. No preemption, no reordering, so start times are
monotone in every duration and raising a bandwidth can never slow anything
down.

Resources
---------
``host``              shared system interconnect (half duplex, effective bandwidth)
``ssd{d}.read``       flash read channel of device ``d``
``ssd{d}.write``      flash write channel of device ``d``
``p2p{d}.up/.down``   CSD internal switch, SSD to accelerator and back
``acc{d}``            CSD accelerator (update and decompression)
``expansion{g}``      optional shared uplink of an expansion switch
``cpu``               host optimizer update
``gpu``, ``gpu_link`` GPU compute and its own link to host memory
"""
from __future__ import annotations

import csv
from dataclasses import asdict
from dataclasses import dataclass
from typing import Optional

from .compression import HEADER, PAIR_BYTES, keep_count
from .errors import ConfigError, ContractViolation
from .fabric import GB, FabricTopology
from .handler import bytes_per_element
from .numerics import STATE_VARIABLES

PHASES = ("forward", "backward_grad_offload", "update")
BREAKDOWN_NAMES = {
    "forward": "FW",
    "backward_grad_offload": "BW + Gradients Offload",
    "update": "Update + Optimizer states Upload/Offload",
}
MODES = ("base", "su", "su_o", "su_o_c")
MiB = 2 ** 20


@dataclass
class TraceOp:
    id: int
    resource: Optional[str]
    nbytes: int = 0
    phase: str = "update"
    deps: tuple = ()
    tasklet: Optional[int] = None
    label: str = ""
    duration: Optional[float] = None
    latency: float = 0.0


@dataclass
class TimelineEvent:
    resource: Optional[str]
    start: float
    end: float
    nbytes: int
    phase: str
    tasklet: Optional[int]
    label: str


@dataclass
class ComputeProfile:
    """Host, GPU and accelerator constants that are not link bandwidths."""

    name: str = "a5000"
    gpu_flops: float = 45e12
    tokens_per_iteration: int = 4096
    gpu_link_bw: float = 16.0 * GB
    cpu_update_throughput: float = 32.0 * GB
    accel_op_latency: float = 50e-6
    alloc_latency: float = 2e-3
    chunk_bytes: int = 16 * MiB

    def forward_seconds(self, n_params: float) -> float:
        return 2.0 * self.tokens_per_iteration * n_params / self.gpu_flops

    def backward_seconds(self, n_params: float) -> float:
        return 6.0 * self.tokens_per_iteration * n_params / self.gpu_flops


PROFILES = {
    "a5000": ComputeProfile("a5000", gpu_flops=45e12),
    "a100": ComputeProfile("a100", gpu_flops=150e12),
}


@dataclass(frozen=True)
class ModelLayout:
    """Parameter count and offload blocks of a model, as the trace sees it."""

    name: str
    block_sizes: tuple

    @property
    def n_params(self) -> int:
        return sum(self.block_sizes)

    @property
    def model_bytes(self) -> int:
        return 2 * self.n_params

    @classmethod
    def uniform(cls, name: str, n_params: int, n_blocks: int) -> "ModelLayout":
        base, extra = divmod(n_params, n_blocks)
        return cls(name, tuple(base + (1 if i < extra else 0) for i in range(n_blocks)))


LAYOUTS = {
    "gpt2-4.0b": ModelLayout.uniform("gpt2-4.0b", 4_000_000_000, 48),
    "gpt2-8.4b": ModelLayout.uniform("gpt2-8.4b", 8_400_000_000, 72),
}


class Timeline:
    def __init__(self, events: list, phase_times: dict):
        self.events = events
        self.phase_times = phase_times

    @property
    def makespan(self) -> float:
        return sum(self.phase_times.values())

    def busy(self, resource: str) -> float:
        return sum(e.end - e.start for e in self.events if e.resource == resource)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["resource", "start", "end", "bytes", "phase", "tasklet", "label"])
            for e in self.events:
                w.writerow([e.resource or "", f"{e.start:.9f}", f"{e.end:.9f}", e.nbytes,
                            e.phase, "" if e.tasklet is None else e.tasklet, e.label])


def resource_bandwidth(resource: str, topology: FabricTopology,
                       profile: ComputeProfile) -> Optional[float]:
    """Bytes per second of ``resource``; ``None`` means explicit durations only."""
    if resource == "host":
        return topology.effective_host_bw
    if resource == "cpu":
        return profile.cpu_update_throughput
    if resource == "gpu_link":
        return profile.gpu_link_bw
    if resource == "gpu":
        return None
    try:
        if resource.startswith("ssd"):
            dev, chan = resource[3:].split(".")
            d = topology.devices[int(dev)]
            return {"read": d.read_bw, "write": d.write_bw}[chan]
        if resource.startswith("p2p"):
            dev, chan = resource[3:].split(".")
            if chan not in ("up", "down"):
                raise KeyError(chan)
            return topology.devices[int(dev)].internal_link_bw
        if resource.startswith("acc"):
            return topology.devices[int(resource[3:])].accel_update_throughput
        if resource.startswith("expansion"):
            g = int(resource[9:])
            if topology.expansion is None or not 0 <= g < len(topology.expansion):
                raise KeyError(resource)
            return topology.expansion_bw
    except (KeyError, IndexError, ValueError):
        pass
    raise ConfigError(f"trace references unknown resource {resource!r}")


def simulate(trace, topology: FabricTopology, profile: Optional[ComputeProfile] = None) -> Timeline:
    """Schedule ``trace`` and return its timeline with per-phase wall times.

    A phase's wall time is the time from the end of the previous phase to
    the last end among its own ops.
    """
    profile = profile or PROFILES["a5000"]
    free: dict = {}
    ends: dict = {}
    bw_cache: dict = {}
    events = []
    for op in trace:
        if op.id in ends:
            raise ContractViolation(f"duplicate op id {op.id}")
        ready = 0.0
        for d in op.deps:
            if d not in ends:
                raise ContractViolation(f"op {op.id} depends on unscheduled op {d}")
            ready = max(ready, ends[d])
        if op.duration is not None:
            dur = op.duration
        elif op.resource is None:
            dur = 0.0
        else:
            if op.resource not in bw_cache:
                bw_cache[op.resource] = resource_bandwidth(op.resource, topology, profile)
            bw = bw_cache[op.resource]
            if bw is None:
                raise ContractViolation(f"op {op.id} on {op.resource} needs an explicit duration")
            dur = op.latency + op.nbytes / bw
        if op.resource is not None:
            if op.resource not in bw_cache:
                bw_cache[op.resource] = resource_bandwidth(op.resource, topology, profile)
            start = max(ready, free.get(op.resource, 0.0))
            free[op.resource] = start + dur
        else:
            start = ready
        ends[op.id] = start + dur
        events.append(TimelineEvent(op.resource, start, start + dur, op.nbytes, op.phase,
                                    op.tasklet, op.label))
    return Timeline(events, _phase_times(events))


def _phase_times(events) -> dict:
    times = {}
    boundary = 0.0
    for ph in PHASES:
        last = max((e.end for e in events if e.phase == ph), default=None)
        if last is None:
            times[ph] = 0.0
            continue
        times[ph] = max(0.0, last - boundary)
        boundary = max(boundary, last)
    return times


def summarize(timeline: Timeline) -> dict:
    """Per-phase breakdown: seconds and fraction per category plus the total."""
    total = timeline.makespan
    out = {"total": total}
    for ph, name in BREAKDOWN_NAMES.items():
        t = timeline.phase_times.get(ph, 0.0)
        out[name] = t
        out[name + " (fraction)"] = t / total if total > 0 else 0.0
    return out


def write_breakdown_csv(rows, path) -> None:
    """``rows``: iterable of ``(label, summary_dict)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        names = list(BREAKDOWN_NAMES.values())
        w.writerow(["config"] + names + ["total"])
        for label, s in rows:
            w.writerow([label] + [f"{s[n]:.6f}" for n in names] + [f"{s['total']:.6f}"])


class TraceBuilder:
    """Emits ops with fresh ids; transfers are split into store-and-forward chunks."""

    def __init__(self, topology: FabricTopology, profile: ComputeProfile):
        self.topology = topology
        self.profile = profile
        self.ops: list = []
        self.phase = "forward"

    def op(self, resource, nbytes=0, deps=(), *, duration=None, latency=0.0,
           tasklet=None, label="") -> int:
        i = len(self.ops)
        self.ops.append(TraceOp(i, resource, int(nbytes), self.phase, tuple(deps), tasklet,
                                label, duration, latency))
        return i

    def join(self, deps, label="join") -> int:
        return self.op(None, 0, deps, duration=0.0, label=label)

    def transfer(self, stages, nbytes: int, deps=(), *, tasklet=None, label="") -> int:
        """Move ``nbytes`` through ``stages`` chunk by chunk; returns a join op id."""
        chunk = self.profile.chunk_bytes
        lasts = []
        pos = 0
        while pos < nbytes or (nbytes == 0 and pos == 0):
            n = min(chunk, nbytes - pos)
            prev = tuple(deps)
            for res in stages:
                prev = (self.op(res, n, prev, tasklet=tasklet, label=label),)
            lasts.extend(prev)
            pos += max(n, 1)
        return self.join(lasts, label + ":done" if label else "done")

    def host_stages(self, dev: int, to_device: bool) -> list:
        g = self.topology.expansion_group(dev)
        mid = ["host"] + ([f"expansion{g}"] if g is not None else [])
        if to_device:
            return mid + [f"ssd{dev}.write"]
        return [f"ssd{dev}.read"] + mid[::-1]


def _gpu_phase(b: TraceBuilder, layout: ModelLayout, phase: str, deps=()) -> list:
    """Per-block GPU compute, with fp16 traffic over the GPU's own link."""
    b.phase = phase
    n = layout.n_params
    total = (b.profile.forward_seconds(n) if phase == "forward"
             else b.profile.backward_seconds(n))
    blocks = layout.block_sizes if phase == "forward" else layout.block_sizes[::-1]
    done = []
    prev = tuple(deps)
    for size in blocks:
        link = b.transfer(["gpu_link"], 2 * size, prev, label="fp16")
        prev = (b.op("gpu", 0, (link,), duration=total * size / n, label=phase),)
        done.append(prev[0])
    return done


def partition_sizes(n_params: int, n_devices: int) -> list:
    base, extra = divmod(n_params, n_devices)
    return [base + (1 if i < extra else 0) for i in range(n_devices)]


def _block_spans(layout: ModelLayout):
    pos = 0
    for i, size in enumerate(layout.block_sizes):
        yield i, pos, size
        pos += size


def _pieces(lo: int, n: int, cuts: list):
    """Split ``[lo, lo + n)`` at the sorted global positions ``cuts``."""
    out = []
    pos, stop = lo, lo + n
    for c in cuts:
        if pos < c < stop:
            out.append((pos, c - pos))
            pos = c
    out.append((pos, stop - pos))
    return out


def _owner(offsets: list, x: int) -> int:
    lo, hi = 0, len(offsets) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if offsets[mid] <= x:
            lo = mid
        else:
            hi = mid - 1
    return lo


def sparse_piece_plan(layout: ModelLayout, dev_offsets: list, subgroup_cuts: list,
                      keep_fraction: float) -> list:
    """Per-piece ``(device, global_start, length, k)`` for Top-K records.

    Each block keeps ``keep_count`` entries in total; the trace does not know
    which elements survive, so ``k`` is spread over the pieces by size with
    the remainder given to the leading pieces.
    """
    out = []
    for _, lo, size in _block_spans(layout):
        k = keep_count(size, keep_fraction)
        pieces = _pieces(lo, size, subgroup_cuts)
        shares = [k * n // size for _, n in pieces]
        rest = k - sum(shares)
        for j in range(len(pieces)):
            if rest == 0:
                break
            if shares[j] < pieces[j][1]:
                shares[j] += 1
                rest -= 1
        for (start, n), kk in zip(pieces, shares):
            out.append((_owner(dev_offsets, start), start, n, kk))
    return out


def subgroup_plan(n_params: int, n_devices: int, accel_mem: int, optimizer: str) -> list:
    """Per device, the list of ``(global_start, length)`` subgroups."""
    per = accel_mem // bytes_per_element(optimizer)
    if per < 1:
        raise ConfigError("accelerator memory cannot hold one element")
    plan = []
    pos = 0
    for size in partition_sizes(n_params, n_devices):
        plan.append([(pos + lo, min(per, size - lo)) for lo in range(0, size, per)])
        pos += size
    return plan


def build_trace(layout: ModelLayout, topology: FabricTopology, mode: str, *,
                optimizer: str = "adam", compression_pct: Optional[float] = None,
                profile: Optional[ComputeProfile] = None, pipelined: Optional[bool] = None,
                raid_stripe: Optional[int] = None) -> list:
    """Trace of one training iteration of ``layout`` in ``mode``.

    ``pipelined`` overrides the transfer-handler schedule (naive for ``su``,
    optimised otherwise).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    profile = profile or PROFILES["a5000"]
    b = TraceBuilder(topology, profile)
    n_dev = len(topology.devices)
    nvars = len(STATE_VARIABLES[optimizer])
    fw = _gpu_phase(b, layout, "forward")
    bw = _gpu_phase(b, layout, "backward_grad_offload", (b.join(fw, "fw_end"),))
    blocks_rev = list(_block_spans(layout))[::-1]
    offload = []

    if mode == "base":
        stripe = raid_stripe or profile.chunk_bytes
        for (i, lo, size), g in zip(blocks_rev, bw):
            offload.append(_raid_transfer(b, n_dev, stripe, 4 * size, True, (g,), label="grad"))
        b.phase = "update"
        prev = (b.join(bw + offload, "gate"),)
        for i, lo, size in _block_spans(layout):
            rd = _raid_transfer(b, n_dev, stripe, 4 * size * (nvars + 1), False, prev,
                                label="states+grad")
            cpu = b.op("cpu", 4 * size * (nvars + 1), (rd,), label="host_update")
            prev = (_raid_transfer(b, n_dev, stripe, 4 * size * nvars, True, (cpu,),
                                   label="states"),)
        return b.ops

    sub = subgroup_plan(layout.n_params, n_dev, topology.devices[0].accel_mem_capacity,
                        optimizer)
    dev_offsets = [s[0][0] for s in sub]
    compressed = mode == "su_o_c"
    sparse_bytes: dict = {}
    if compressed:
        if compression_pct is None:
            raise ConfigError("su_o_c needs compression_pct")
        cuts = sorted(s for dev in sub for s, _ in dev)
        plan = sparse_piece_plan(layout, dev_offsets, cuts, compression_pct / 200.0)
        by_block = {}
        for dev, start, n, k in plan:
            by_block.setdefault(_owner([lo for _, lo, _ in _block_spans(layout)], start),
                                []).append((dev, start, k))
        for (i, lo, size), g in zip(blocks_rev, bw):
            for dev, start, k in by_block[i]:
                rec = HEADER.size + PAIR_BYTES * k
                t = _owner([s for s, _ in sub[dev]], start)
                sparse_bytes[(dev, t)] = sparse_bytes.get((dev, t), 0) + rec
                offload.append(b.transfer(b.host_stages(dev, True), rec, (g,), label="sparse"))
    else:
        for (i, lo, size), g in zip(blocks_rev, bw):
            for start, n in _pieces(lo, size, dev_offsets):
                dev = _owner(dev_offsets, start)
                offload.append(b.transfer(b.host_stages(dev, True), 4 * n, (g,), label="grad"))

    b.phase = "update"
    gate = b.join(bw + offload, "gate")
    naive = (mode == "su") if pipelined is None else not pipelined
    # devices are emitted round-robin, tasklet by tasklet, so that FIFO order
    # on the shared host link follows issue time rather than device id
    runners = []
    for dev in range(n_dev):
        tasks = [(t, n, sparse_bytes.get((dev, t), 0)) for t, (_, n) in enumerate(sub[dev])]
        runner = (_naive_device if naive else _optimized_device)(b, dev, tasks, nvars,
                                                               compressed, gate)
        runners.append(runner)
    while runners:
        runners = [r for r in runners if next(r, StopIteration) is not StopIteration]
    return b.ops


def _raid_transfer(b: TraceBuilder, n_dev: int, stripe: int, nbytes: int, to_device: bool,
                   deps, label="") -> int:
    """Host transfer striped round-robin over ``n_dev`` plain SSDs."""
    lasts = []
    pos, j = 0, 0
    while pos < nbytes:
        n = min(stripe, nbytes - pos)
        lasts.append(b.transfer(b.host_stages(j % n_dev, to_device), n, deps, label=label))
        pos += n
        j += 1
    return b.join(lasts, label)


def _load(b, dev, nbytes, deps, t, label):
    return b.transfer([f"ssd{dev}.read", f"p2p{dev}.up"], nbytes, deps, tasklet=t, label=label)


def _store(b, dev, nbytes, deps, t, label):
    return b.transfer([f"p2p{dev}.down", f"ssd{dev}.write"], nbytes, deps, tasklet=t, label=label)


def _grad_in(b, dev, t, n, sparse, compressed, deps):
    if not compressed:
        return _load(b, dev, 4 * n, deps, t, "load_grad")
    ld = _load(b, dev, sparse, deps, t, "load_sparse")
    bw = b.topology.devices[dev].accel_decomp_throughput
    return b.op(f"acc{dev}", sparse, (ld,), duration=b.profile.accel_op_latency + sparse / bw,
                tasklet=t, label="decompress")


def _update(b, dev, t, n, nvars, deps):
    nbytes = 4 * n * (nvars + 1)
    return b.op(f"acc{dev}", nbytes, deps, latency=b.profile.accel_op_latency, tasklet=t,
                label="update")


def _naive_device(b, dev, tasks, nvars, compressed, gate):
    prev = (gate,)
    for t, n, sparse in tasks:
        alloc = b.op(f"acc{dev}", 0, prev, duration=b.profile.alloc_latency, tasklet=t,
                     label="alloc")
        loads = [_load(b, dev, 4 * n, (alloc,), t, "load_state") for _ in range(nvars)]
        g = _grad_in(b, dev, t, n, sparse, compressed, (alloc,))
        up = _update(b, dev, t, n, nvars, loads + [g])
        pwb = _store(b, dev, 4 * n, (up,), t, "params_wb")
        hr = b.transfer(b.host_stages(dev, False), 4 * n, (pwb,), tasklet=t, label="host_read")
        swbs = [_store(b, dev, 4 * n, (pwb,), t, "state_wb") for _ in range(nvars - 1)]
        prev = (b.op(f"acc{dev}", 0, [hr] + swbs, duration=b.profile.alloc_latency, tasklet=t,
                     label="dealloc"),)
        yield t


def _optimized_device(b, dev, tasks, nvars, compressed, gate):
    """Buffers are reused across tasklets; dependencies encode buffer handoff."""
    if not tasks:
        return
    yield -1
    t0, n0, s0 = tasks[0]
    # buffers were allocated once at initialisation, not per iteration
    grad = _grad_in(b, dev, t0, n0, s0, compressed, (gate,))
    lp = _load(b, dev, 4 * n0, (gate,), t0, "load_params")
    ls = [_load(b, dev, 4 * n0, (gate,), t0, "load_state") for _ in range(nvars - 1)]
    for j, (t, n, sparse) in enumerate(tasks):
        up = _update(b, dev, t, n, nvars, [grad, lp] + ls)
        pwb = _store(b, dev, 4 * n, (up,), t, "params_wb")
        nxt = tasks[j + 1] if j + 1 < len(tasks) else None
        if nxt is not None:
            tn, nn, sn = nxt
            grad = _grad_in(b, dev, tn, nn, sn, compressed, (up,))
        b.transfer(b.host_stages(dev, False), 4 * n, (pwb,), tasklet=t, label="host_read")
        if nxt is not None:
            lp = _load(b, dev, 4 * nn, (pwb,), tn, "load_params")
        swbs = [_store(b, dev, 4 * n, (up,), t, "state_wb") for _ in range(nvars - 1)]
        if nxt is not None:
            ls = [_load(b, dev, 4 * nn, (w,), tn, "load_state") for w in swbs]
        yield t


def traffic_from_trace(trace) -> dict:
    """Host-edge bytes per phase and direction implied by a trace.

    A host op is a read when it follows an SSD read in its chunk chain.
    """
    by_id = {op.id: op for op in trace}
    out = {}
    for op in trace:
        if op.resource != "host":
            continue
        src = by_id[op.deps[0]] if op.deps else None
        direction = "read" if src is not None and src.resource and src.resource.endswith(".read") \
            else "write"
        key = f"host_{direction}_{op.phase}"
        out[key] = out.get(key, 0) + op.nbytes
    return out


def iteration_time(layout, topology, mode, **kw) -> dict:
    tl = simulate(build_trace(layout, topology, mode, **kw), topology, kw.get("profile"))
    return summarize(tl)


def update_time(layout, topology, mode, **kw) -> float:
    tl = simulate(build_trace(layout, topology, mode, **kw), topology, kw.get("profile"))
    return tl.phase_times["update"]


def speedup_curve(layout, mode, devices, *, base_topology: Optional[FabricTopology] = None,
                  phase: str = "update", **kw) -> dict:
    """``{n: time(1) / time(n)}`` for the given phase (or ``"total"``)."""
    times = {}
    for n in sorted(set(devices) | {1}):
        topo = scaled_topology(base_topology, n, "ssd" if mode == "base" else "csd")
        tl = simulate(build_trace(layout, topo, mode, **kw), topo, kw.get("profile"))
        times[n] = tl.makespan if phase == "total" else tl.phase_times[phase]
    return {n: times[1] / times[n] for n in devices}


def scaled_topology(base: Optional[FabricTopology], n: int, kind: str) -> FabricTopology:
    """``n`` copies of ``base``'s first device behind ``base``'s host link."""
    if base is None:
        return FabricTopology.uniform(n, kind)
    proto = base.devices[0]
    devs = [dict(asdict(proto), kind=kind) for _ in range(n)]
    return FabricTopology(devs, base.host_link_bw, base.host_link_efficiency)


def analytic_base_bound(n: int, topology: FabricTopology) -> float:
    """Upper bound on RAID0 update speedup: ``min(n, host_bw / dev_bw)``."""
    return min(n, topology.effective_host_bw / topology.devices[0].read_bw)


