"""Simulated storage fabric: SSDs, computational storage devices, RAID0.

Functional layer only. Bytes really move through per-device backing files
and every transfer is counted, per edge and per training phase, in a
:class:`TrafficLedger`. Bandwidth is not enforced here; timing is the job
of :mod:`smartinf.perfsim`.

Edges:
  ``host``      the shared system interconnect between host memory and a device
  ``internal``  a CSD's private switch between its SSD and its accelerator
"""
from __future__ import annotations

import json
import os
import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .errors import CapacityError, ConfigError, ContractViolation, UnsupportedOperation

PHASES = ("forward", "backward_grad_offload", "update")
EDGES = ("host", "internal")
DIRECTIONS = ("read", "write")

GB = 10 ** 9
GiB = 2 ** 30


@dataclass
class DeviceDesc:
    kind: str = "csd"
    read_bw: float = 3.2 * GB
    write_bw: float = 3.0 * GB
    internal_link_bw: float = 3.2 * GB
    accel_mem_capacity: int = 4 * GiB
    accel_update_throughput: float = 7.0 * GB
    accel_decomp_throughput: float = 3.5 * GB
    capacity: int = 4 * 10 ** 12

    def validate(self) -> None:
        if self.kind not in ("ssd", "csd"):
            raise ConfigError(f"unknown device kind {self.kind!r}")
        for name in ("read_bw", "write_bw", "internal_link_bw",
                     "accel_update_throughput", "accel_decomp_throughput"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.kind == "csd" and not self.accel_mem_capacity > 0:
            raise ConfigError("a CSD needs accelerator memory")
        if not self.capacity > 0:
            raise ConfigError("capacity must be positive")


@dataclass
class FabricTopology:
    """Host link plus attached devices.

    ``host_link_efficiency`` derates the nominal host link for protocol and
    expansion-switch overhead; timing uses ``host_link_bw * efficiency``.
    ``expansion`` optionally groups device ids behind shared switch uplinks
    of ``expansion_bw`` each.
    """

    devices: list = field(default_factory=list)
    host_link_bw: float = 16.0 * GB
    host_link_efficiency: float = 0.8
    expansion: Optional[list] = None
    expansion_bw: Optional[float] = None

    def __post_init__(self):
        self.devices = [d if isinstance(d, DeviceDesc) else DeviceDesc(**d) for d in self.devices]
        self.validate()

    @classmethod
    def uniform(cls, n_devices: int, kind: str = "csd", **kwargs) -> "FabricTopology":
        dev_fields = {k: kwargs.pop(k) for k in list(kwargs) if k in DeviceDesc.__dataclass_fields__}
        return cls(devices=[DeviceDesc(kind=kind, **dev_fields) for _ in range(n_devices)], **kwargs)

    def validate(self) -> None:
        if not self.devices:
            raise ConfigError("topology needs at least one device")
        if not self.host_link_bw > 0 or not 0 < self.host_link_efficiency <= 1:
            raise ConfigError("host link bandwidth and efficiency must be positive")
        for d in self.devices:
            d.validate()
        if self.expansion is not None:
            if not self.expansion_bw or self.expansion_bw <= 0:
                raise ConfigError("expansion groups need a positive expansion_bw")
            seen = [i for g in self.expansion for i in g]
            if sorted(seen) != sorted(set(seen)) or any(not 0 <= i < len(self.devices) for i in seen):
                raise ConfigError("expansion groups must be disjoint device ids")

    @property
    def effective_host_bw(self) -> float:
        return self.host_link_bw * self.host_link_efficiency

    def expansion_group(self, dev: int) -> Optional[int]:
        if self.expansion is None:
            return None
        for g, members in enumerate(self.expansion):
            if dev in members:
                return g
        return None

    def with_kind(self, kind: str) -> "FabricTopology":
        devs = [DeviceDesc(**{**asdict(d), "kind": kind}) for d in self.devices]
        return FabricTopology(devs, self.host_link_bw, self.host_link_efficiency,
                              self.expansion, self.expansion_bw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FabricTopology":
        data = dict(data)
        if "n_devices" in data:
            n = data.pop("n_devices")
            proto = data.pop("device", {})
            data["devices"] = [dict(proto) for _ in range(n)]
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad topology: {exc}") from None

    @classmethod
    def load(cls, path) -> "FabricTopology":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"topology file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


class TrafficLedger:
    """Byte counters keyed by ``(edge, device, direction, phase)``.

    The current phase is set by the engine with :meth:`phase`; it is a
    plain shared attribute so worker threads inherit it.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Counter = Counter()
        self._phase = "update"
        self.transfers = 0

    @contextmanager
    def phase(self, name: str):
        if name not in PHASES:
            raise ContractViolation(f"unknown phase {name!r}")
        prev, self._phase = self._phase, name
        try:
            yield
        finally:
            self._phase = prev

    @property
    def current_phase(self) -> str:
        return self._phase

    def record(self, edge: str, device: int, direction: str, nbytes: int) -> None:
        if edge not in EDGES or direction not in DIRECTIONS:
            raise ContractViolation(f"bad ledger key {edge}/{direction}")
        if nbytes < 0:
            raise ContractViolation("negative transfer size")
        with self._lock:
            self._counts[(edge, device, direction, self._phase)] += nbytes
            self.transfers += 1

    def total(self, edge: str = "host", direction: str = "read",
              phase: Optional[str] = None, device: Optional[int] = None) -> int:
        with self._lock:
            return sum(v for (e, d, r, p), v in self._counts.items()
                       if e == edge and r == direction
                       and (phase is None or p == phase)
                       and (device is None or d == device))

    def snapshot(self) -> Counter:
        with self._lock:
            return Counter(self._counts)

    def since(self, snap: Counter) -> Counter:
        now = self.snapshot()
        now.subtract(snap)
        return +now

    @staticmethod
    def summarize(counts: Counter) -> dict:
        """Flatten counters to ``{"host_read": .., "host_write_update": .., ...}``."""
        out = {}
        for edge in EDGES:
            for direction in DIRECTIONS:
                out[f"{edge}_{direction}"] = sum(
                    v for (e, _, r, _), v in counts.items() if e == edge and r == direction)
                for ph in PHASES:
                    out[f"{edge}_{direction}_{ph}"] = sum(
                        v for (e, _, r, p), v in counts.items()
                        if e == edge and r == direction and p == ph)
        return out


@dataclass(frozen=True)
class Extent:
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


class ShardStore:
    """One backing file per device plus a JSON sidecar manifest.

    Regions are bump-allocated and never overlap. Reads and writes on one
    store are serialised by a lock.
    """

    def __init__(self, device_id: int, path, capacity: int):
        self.device_id = device_id
        self.path = Path(path)
        self.capacity = capacity
        self.size = 0
        self.regions: dict = {}
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)

    @property
    def manifest_path(self) -> Path:
        return self.path.with_suffix(self.path.suffix + ".manifest.json")

    def allocate(self, name: str, nbytes: int, **meta) -> Extent:
        if name in self.regions:
            raise ContractViolation(f"region {name!r} already allocated")
        if self.size + nbytes > self.capacity:
            raise CapacityError(
                f"device {self.device_id}: {nbytes} B does not fit ({self.size}/{self.capacity} used)")
        ext = Extent(self.size, nbytes)
        self.regions[name] = {"offset": ext.offset, "length": ext.length, **meta}
        self.size += nbytes
        os.ftruncate(self._fd, self.size)
        self.save_manifest()
        return ext

    def region(self, name: str) -> Extent:
        r = self.regions[name]
        return Extent(r["offset"], r["length"])

    def _check(self, ext: Extent) -> None:
        if ext.offset < 0 or ext.length < 0:
            raise ContractViolation(f"bad extent {ext}")
        if ext.stop > self.capacity:
            raise CapacityError(f"extent {ext} beyond capacity of device {self.device_id}")
        if ext.stop > self.size:
            raise ContractViolation(f"extent {ext} outside allocated store of device {self.device_id}")

    def read(self, ext: Extent) -> bytes:
        self._check(ext)
        with self._lock:
            data = os.pread(self._fd, ext.length, ext.offset)
        if len(data) != ext.length:
            raise ContractViolation(f"short read on device {self.device_id}")
        return data

    def write(self, ext: Extent, data) -> None:
        data = memoryview(data).cast("B")
        if len(data) != ext.length:
            raise ContractViolation(f"payload of {len(data)} B does not match extent {ext}")
        self._check(ext)
        with self._lock:
            done = os.pwrite(self._fd, data, ext.offset)
        if done != ext.length:
            raise ContractViolation(f"short write on device {self.device_id}")

    def save_manifest(self) -> None:
        doc = {"device_id": self.device_id, "file": self.path.name, "size": self.size,
               "byteorder": "little", "regions": self.regions}
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class Fabric:
    """Devices, their stores, and the traffic ledger."""

    def __init__(self, topology: FabricTopology, workdir, ledger: Optional[TrafficLedger] = None):
        self.topology = topology
        self.workdir = Path(workdir)
        self.ledger = ledger or TrafficLedger()
        self.stores = [ShardStore(i, self.workdir / f"dev{i}.bin", d.capacity)
                       for i, d in enumerate(topology.devices)]

    def __len__(self) -> int:
        return len(self.stores)

    def kind(self, dev: int) -> str:
        return self.topology.devices[dev].kind

    def provision(self, dev: int, ext: Extent, data) -> None:
        """Initial placement before training starts; not counted as traffic."""
        self.stores[dev].write(ext, data)

    def host_read(self, dev: int, ext: Extent) -> bytes:
        data = self.stores[dev].read(ext)
        self.ledger.record("host", dev, "read", ext.length)
        return data

    def host_write(self, dev: int, ext: Extent, data) -> None:
        self.stores[dev].write(ext, data)
        self.ledger.record("host", dev, "write", ext.length)

    def _require_csd(self, dev: int) -> None:
        if self.kind(dev) != "csd":
            raise UnsupportedOperation(f"device {dev} is a plain SSD; no internal P2P path")

    def p2p_read(self, dev: int, ext: Extent) -> bytes:
        self._require_csd(dev)
        data = self.stores[dev].read(ext)
        self.ledger.record("internal", dev, "read", ext.length)
        return data

    def p2p_write(self, dev: int, ext: Extent, data) -> None:
        self._require_csd(dev)
        self.stores[dev].write(ext, data)
        self.ledger.record("internal", dev, "write", ext.length)

    def close(self) -> None:
        for s in self.stores:
            s.close()


def raid0_map(offset: int, length: int, stripe_size: int, n_devices: int) -> list:
    """Map a logical extent onto round-robin stripes.

    Returns ``[(device, Extent(device_offset, len), logical_offset), ...]``
    in logical order; concatenating the pieces reconstructs the extent.
    """
    if stripe_size <= 0 or n_devices <= 0:
        raise ContractViolation("stripe_size and n_devices must be positive")
    pieces = []
    pos, stop = offset, offset + length
    while pos < stop:
        stripe, within = divmod(pos, stripe_size)
        dev = stripe % n_devices
        run = min(stripe_size - within, stop - pos)
        dev_off = (stripe // n_devices) * stripe_size + within
        pieces.append((dev, Extent(dev_off, run), pos))
        pos += run
    return pieces


class Raid0Volume:
    """A striped logical volume over plain SSD regions, accessed from the host."""

    def __init__(self, fabric: Fabric, device_ids, stripe_size: int, size: int,
                 region: str = "raid0"):
        self.fabric = fabric
        self.device_ids = list(device_ids)
        self.stripe_size = stripe_size
        self.size = size
        self._names: dict = {}
        self._next = 0
        n = len(self.device_ids)
        stripes = -(-size // stripe_size)
        per_dev = -(-stripes // n) * stripe_size
        self._base = [fabric.stores[d].allocate(region, per_dev, kind="raid0",
                                                stripe_size=stripe_size, members=self.device_ids)
                      for d in self.device_ids]

    def allocate(self, name: str, nbytes: int) -> Extent:
        if self._next + nbytes > self.size:
            raise CapacityError(f"RAID0 volume full allocating {name!r}")
        ext = Extent(self._next, nbytes)
        self._names[name] = ext
        self._next += nbytes
        return ext

    def _pieces(self, offset: int, length: int):
        if offset < 0 or offset + length > self.size:
            raise ContractViolation("extent outside RAID0 volume")
        for dev_i, ext, logical in raid0_map(offset, length, self.stripe_size, len(self.device_ids)):
            base = self._base[dev_i]
            yield self.device_ids[dev_i], Extent(base.offset + ext.offset, ext.length), logical

    def read(self, offset: int, length: int) -> bytes:
        out = bytearray(length)
        for dev, ext, logical in self._pieces(offset, length):
            lo = logical - offset
            out[lo:lo + ext.length] = self.fabric.host_read(dev, ext)
        return bytes(out)

    def write(self, offset: int, data) -> None:
        data = memoryview(data).cast("B")
        for dev, ext, logical in self._pieces(offset, len(data)):
            lo = logical - offset
            self.fabric.host_write(dev, ext, data[lo:lo + ext.length])

    def provision(self, offset: int, data) -> None:
        data = memoryview(data).cast("B")
        for dev, ext, logical in self._pieces(offset, len(data)):
            lo = logical - offset
            self.fabric.provision(dev, ext, data[lo:lo + ext.length])
