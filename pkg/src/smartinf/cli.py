"""Command-line entry point: ``smartinf train | sweep | verify | bench``."""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .config import OUTPUT_ENV, ExperimentConfig
from .engine import run_experiment, write_aggregate_csv, write_reports_csv
from .errors import ConfigError
from .fabric import FabricTopology
from .perfsim import (BREAKDOWN_NAMES, LAYOUTS, MODES as SIM_MODES, PROFILES, build_trace,
                      scaled_topology, simulate, summarize, write_breakdown_csv)


def _int_list(text: str) -> list:
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(text: str) -> list:
    return [float(p) for p in text.split(",") if p]


def _output_dir(flag) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    out = Path(env if env else flag)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    data = {}
    if args.config:
        data = ExperimentConfig.load(args.config).to_dict()
    overrides = {
        "mode": args.mode, "devices": args.devices, "seed": args.seed, "steps": args.steps,
        "compression_pct": args.compression_pct, "topology": args.topology,
        "output_dir": args.out,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.optimizer:
        data["optimizer"] = dict(data.get("optimizer") or {}, kind=args.optimizer)
    if args.deterministic:
        data["deterministic"] = True
    cfg = ExperimentConfig.from_dict(data)
    topo = cfg.load_topology()
    out = _output_dir(cfg.output_dir)
    reports, agg = run_experiment(cfg.engine_config(), cfg.steps, topo)
    write_reports_csv(reports, out / "steps.csv")
    write_aggregate_csv(agg, out / "aggregate.csv")
    m = 2 * sum(o * i + o for i, o in zip(cfg.model_sizes[:-1], cfg.model_sizes[1:]))
    lines = [f"mode {cfg.mode}, {len(topo.devices)} device(s), {cfg.steps} step(s), seed {cfg.seed}",
             f"model bytes M = {m}"]
    if reports:
        last = reports[-1].traffic
        lines.append(f"last iteration host read {last['host_read']} B ({last['host_read'] / m:g} M), "
                     f"host write {last['host_write']} B ({last['host_write'] / m:g} M)")
        lines.append(f"final training loss {agg['final_loss']:.6g}, "
                     f"eval loss {agg['final_eval_loss']:.6g}, skipped {agg['skipped']}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"reports written to {out}")
    return 0


def cmd_sweep(args) -> int:
    layout = LAYOUTS[args.layout]
    profile = PROFILES[args.gpu]
    modes = args.modes.split(",")
    for m in modes:
        if m not in SIM_MODES:
            raise ConfigError(f"unknown mode {m!r}")
    devices = _int_list(args.devices)
    ratios = _float_list(args.ratios) if args.ratios else [2.0]
    base_topo = FabricTopology.load(args.topology) if args.topology else None
    out = _output_dir(args.out)

    def topo_for(n, mode):
        return scaled_topology(base_topo, n, "ssd" if mode == "base" else "csd")

    rows, breakdown = [], []
    cache = {}

    def run(mode, n, pct):
        key = (mode, n, pct)
        if key not in cache:
            topo = topo_for(n, mode)
            tl = simulate(build_trace(layout, topo, mode, compression_pct=pct, profile=profile),
                          topo, profile)
            cache[key] = summarize(tl)
        return cache[key]

    upd = BREAKDOWN_NAMES["update"]
    ref = run("base", 1, None)["total"]
    for mode in modes:
        for pct in (ratios if mode == "su_o_c" else [None]):
            one = run(mode, 1, pct)
            for n in devices:
                s = run(mode, n, pct)
                rows.append([layout.name, profile.name, mode, n, "" if pct is None else pct,
                             f"{s[upd]:.6f}", f"{s['total']:.6f}", f"{one[upd] / s[upd]:.6f}",
                             f"{ref / s['total']:.6f}", f"{s[upd + ' (fraction)']:.6f}"])
                label = f"{mode}-{n}" + ("" if pct is None else f"-c{pct:g}")
                breakdown.append((label, s))
    with open(out / "speedup.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layout", "gpu", "mode", "devices", "compression_pct", "update_s",
                    "iteration_s", "update_speedup_vs_1", "speedup_vs_base_1", "update_fraction"])
        w.writerows(rows)
    write_breakdown_csv(breakdown, out / "breakdown.csv")
    for r in rows:
        print(",".join(str(x) for x in r))
    print(f"sweep written to {out}")
    return 0


def _flip_byte(workdir) -> None:
    path = Path(workdir) / "dev0.bin"
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 3] ^= 0xFF
    path.write_bytes(bytes(raw))


def cmd_verify(args) -> int:
    from .verify import format_table, ledger_suite, oracle_suite, roundtrip_suite

    tamper = _flip_byte if args.inject_corruption else None
    results = []
    if "oracle" in args.suites:
        results += oracle_suite()
    if "ledger" in args.suites:
        results += ledger_suite(args.workdir, tamper)
    if "roundtrip" in args.suites:
        results += roundtrip_suite()
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(args) -> int:
    from .bench import format_results, run_benchmarks

    print(format_results(run_benchmarks(args.size, args.repeat)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smartinf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy model and write per-step CSV reports")
    t.add_argument("--config", help="JSON experiment config; flags override its fields")
    t.add_argument("--mode", choices=["memory", "base", "su", "su_o", "su_o_c"])
    t.add_argument("--devices", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--optimizer", choices=["adam", "sgd_momentum", "adagrad"])
    t.add_argument("--compression-pct", type=float)
    t.add_argument("--topology", help="JSON topology file")
    t.add_argument("--deterministic", action="store_true",
                   help="single-threaded pipelines; outputs are byte-identical across runs")
    t.add_argument("--out", help=f"output directory (overridden by ${OUTPUT_ENV})")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="simulated speedups over devices, modes and ratios")
    s.add_argument("--layout", choices=sorted(LAYOUTS), default="gpt2-8.4b")
    s.add_argument("--gpu", choices=sorted(PROFILES), default="a5000")
    s.add_argument("--modes", default="base,su,su_o,su_o_c")
    s.add_argument("--devices", default="1-10", help="e.g. 1-10 or 1,2,4,8")
    s.add_argument("--ratios", default="2", help="compression percentages for su_o_c")
    s.add_argument("--topology", help="JSON topology whose first device is the prototype")
    s.add_argument("--out", default="smartinf-sweep")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="oracle, ledger and roundtrip self-checks")
    v.add_argument("--suites", default="oracle,ledger,roundtrip")
    v.add_argument("--workdir", help="keep the ledger suite's device files here")
    v.add_argument("--inject-corruption", action="store_true",
                   help="flip one byte of a device file before the integrity check")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="compiled kernels against the numpy fallback")
    b.add_argument("--size", type=int, default=1 << 20)
    b.add_argument("--repeat", type=int, default=5)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
