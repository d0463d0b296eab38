"""Self-check suites behind ``smartinf verify``.

Three suites, each a list of named checks:

* ``oracle``: updater kernels against scalar references (every backend),
  plus a bit comparison of the near-storage and host-update modes;
* ``ledger``: per-mode host-edge byte counts of one iteration, and the
  integrity of the persisted device stores;
* ``roundtrip``: Top-K against brute force, the sparse wire format,
  RAID0 reassembly and fp16 widening.
"""
from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kernels, reference
from .compression import SparseGradient, compress_topk, decompress_scatter
from .engine import Engine, EngineConfig
from .errors import CorruptStreamError
from .fabric import Fabric, FabricTopology, Raid0Volume
from .numerics import OptimizerConfig, OptimizerShard, apply_update, narrow, widen


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _same(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def oracle_suite(trials: int = 50, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for name, backend in sorted(kernels.available_backends().items()):
        for kind in ("adam", "sgd_momentum", "adagrad"):
            bad = 0
            for _ in range(trials):
                n = int(rng.integers(1, 40))
                p = rng.standard_normal(n).astype(np.float32)
                m = rng.standard_normal(n).astype(np.float32)
                v = np.abs(rng.standard_normal(n)).astype(np.float32)
                g = rng.standard_normal(n).astype(np.float32)
                clip = float(np.float32(rng.uniform(0.1, 1.0)))
                step = int(rng.integers(0, 20))
                cfg = OptimizerConfig(kind=kind, lr=float(rng.uniform(1e-4, 1e-1)))
                sh = OptimizerShard(p.copy(), m.copy(), v.copy(), step)
                apply_update(sh, g, cfg, clip, backend=backend)
                if kind == "adam":
                    ref = reference.adam_scalar(p, m, v, g, lr=cfg.lr, beta1=cfg.beta1,
                                                beta2=cfg.beta2, eps=cfg.eps, step=step + 1,
                                                clip=clip)
                    got = (sh.params32, sh.momentum, sh.variance)
                elif kind == "sgd_momentum":
                    ref = reference.sgd_momentum_scalar(p, m, g, lr=cfg.lr,
                                                        momentum_coef=cfg.momentum_coef, clip=clip)
                    got = (sh.params32, sh.momentum)
                else:
                    ref = reference.adagrad_scalar(p, v, g, lr=cfg.lr, eps=cfg.eps, clip=clip)
                    got = (sh.params32, sh.variance)
                bad += not all(_same(a, b) for a, b in zip(got, ref))
            out.append(CheckResult("oracle", f"oracle.{kind}.{name}", bad == 0,
                                   f"{trials - bad}/{trials} exact"))
    states = {}
    for mode in ("memory", "base", "su_o"):
        with Engine(EngineConfig(mode=mode, deterministic=True),
                    FabricTopology.uniform(2)) as eng:
            for _ in range(3):
                eng.train_step()
            states[mode] = (eng.params16.copy(), eng.master_state())
    ok = all(_same(states[m][0], states["memory"][0])
             and all(_same(states[m][1][k], states["memory"][1][k]) for k in states[m][1])
             for m in ("base", "su_o"))
    out.append(CheckResult("oracle", "oracle.mode_identity", ok,
                           "su_o == base == memory after 3 steps" if ok else "states differ"))
    return out


HOST_TRAFFIC_M = {
    # mode -> (host read, host write) in units of M for one iteration
    "base": (8, 8),
    "su": (2, 2),
    "su_o": (2, 2),
}


def ledger_suite(workdir=None, tamper: Optional[Callable] = None) -> list:
    """Per-mode traffic signatures, then the persisted-store integrity check.

    ``tamper(workdir)`` is called between training and the integrity check.
    """
    out = []
    ref = None
    with Engine(EngineConfig(mode="memory", deterministic=True)) as mem:
        mem.train_step()
        ref = mem.master_state()
    m_bytes = 2 * mem.model.n_params
    for mode, (rd, wr) in HOST_TRAFFIC_M.items():
        with Engine(EngineConfig(mode=mode, deterministic=True), FabricTopology.uniform(2)) as e:
            t = e.train_step().traffic
        ok = t["host_read"] == rd * m_bytes and t["host_write"] == wr * m_bytes
        out.append(CheckResult("ledger", f"ledger.host_traffic.{mode}", ok,
                               f"read {t['host_read']} B, write {t['host_write']} B"))
    with Engine(EngineConfig(mode="su_o_c", compression_pct=2.0, deterministic=True),
                FabricTopology.uniform(2)) as e:
        r = e.train_step()
    t = r.traffic
    n_pieces = sum(len(v) for v in e.sparse_route.values())
    expect = 16 * n_pieces + 6 * r.kept_pairs
    ok = t["host_read"] == 2 * m_bytes and t["host_write"] == expect
    out.append(CheckResult("ledger", "ledger.host_traffic.su_o_c", ok,
                           f"write {t['host_write']} B = 16*{n_pieces} + 6*{r.kept_pairs}"))

    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="smartinf-verify-")
        workdir = tmp.name
    workdir = Path(workdir)
    try:
        eng = Engine(EngineConfig(mode="su_o", deterministic=True), FabricTopology.uniform(2),
                     workdir)
        eng.train_step()
        eng.fabric.close()
        if tamper is not None:
            tamper(workdir)
        out.append(_store_integrity(workdir, eng, ref))
    finally:
        if tmp is not None:
            tmp.cleanup()
    return out


def _store_integrity(workdir: Path, eng: Engine, ref: dict) -> CheckResult:
    """Re-read every device file from disk and compare with the reference run."""
    name = "ledger.store_integrity"
    for shard in eng.shards:
        store = eng.fabric.stores[shard.dev]
        path = workdir / store.path.name
        manifest = json.loads((workdir / (store.path.name + ".manifest.json")).read_text())
        if not path.exists() or path.stat().st_size != manifest["size"]:
            return CheckResult("ledger", name, False, f"{path.name}: size does not match manifest")
        raw = path.read_bytes()
        seg = shard.owned
        for var in shard.variables:
            r = manifest["regions"][var]
            got = np.frombuffer(raw[r["offset"]:r["offset"] + r["length"]], dtype="<f4")
            if not _same(got, ref[var][seg.offset:seg.stop]):
                return CheckResult("ledger", name, False,
                                   f"{path.name}: {var} differs from the reference state")
    return CheckResult("ledger", name, True, "persisted states match the reference")


def roundtrip_suite(trials: int = 100, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    bad_topk = bad_chunk = bad_wire = 0
    for _ in range(trials):
        n = int(rng.integers(1, 60))
        x = narrow(rng.standard_normal(n) * rng.choice([1e-3, 1.0, 1e3]))
        if rng.random() < 0.3:
            x[rng.integers(0, n, size=n // 2)] = x[0]  # force ties
        k = int(rng.integers(1, n + 1))
        sg = compress_topk(x, k)
        dense = decompress_scatter(sg, 7)
        bad_topk += not _same(dense, reference.topk_projection(x, k))
        bad_chunk += not all(_same(decompress_scatter(sg, s), dense) for s in (1, 64))
        back = SparseGradient.from_bytes(sg.to_bytes())
        bad_wire += not (_same(back.indices, sg.indices) and _same(back.values, sg.values)
                         and back.block_len == sg.block_len)
    out = [
        CheckResult("roundtrip", "roundtrip.topk_vs_bruteforce", bad_topk == 0,
                    f"{trials - bad_topk}/{trials}"),
        CheckResult("roundtrip", "roundtrip.chunk_independence", bad_chunk == 0,
                    f"{trials - bad_chunk}/{trials}"),
        CheckResult("roundtrip", "roundtrip.wire_format", bad_wire == 0,
                    f"{trials - bad_wire}/{trials}"),
    ]
    try:
        SparseGradient.from_bytes(SparseGradient(4, [1, 1], [1, 2]).to_bytes()).validate()
        rejects = False
    except CorruptStreamError:
        rejects = True
    out.append(CheckResult("roundtrip", "roundtrip.rejects_duplicates", rejects, ""))

    every16 = np.arange(65536, dtype=np.uint16).view(np.float16)
    finite = every16[np.isfinite(every16)]
    out.append(CheckResult("roundtrip", "roundtrip.fp16_widen_narrow",
                           _same(narrow(widen(finite)), finite), f"{finite.size} values"))

    with tempfile.TemporaryDirectory(prefix="smartinf-raid-") as d:
        fab = Fabric(FabricTopology.uniform(3, "ssd"), d)
        vol = Raid0Volume(fab, range(3), 512, 20000)
        data = rng.integers(0, 256, size=20000, dtype=np.uint8).tobytes()
        vol.write(0, data)
        ok = all(vol.read(a, b - a) == data[a:b]
                 for a, b in (sorted(rng.integers(0, 20001, size=2)) for _ in range(50)))
        fab.close()
    out.append(CheckResult("roundtrip", "roundtrip.raid0_reassembly", ok, "50 random extents"))
    return out


SUITES = {"oracle": oracle_suite, "ledger": ledger_suite, "roundtrip": roundtrip_suite}


def run_all(workdir=None, tamper=None) -> list:
    return oracle_suite() + ledger_suite(workdir, tamper) + roundtrip_suite()


def format_table(results) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'check':<{w}}  status  detail", "-" * (w + 24)]
    for r in results:
        lines.append(f"{r.name:<{w}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    suites = sorted({r.suite for r in results})
    lines.append("-" * (w + 24))
    for s in suites:
        ok = all(r.passed for r in results if r.suite == s)
        lines.append(f"suite {s}: {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
