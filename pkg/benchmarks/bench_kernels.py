"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--size N] [--repeat R]
"""
import argparse

from smartinf.bench import format_results, run_benchmarks
from smartinf.kernels import available_backends

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=1 << 20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "compiled" not in available_backends():
        print("compiled extension not built; only the numpy fallback is timed")
    print(format_results(run_benchmarks(args.size, args.repeat)))
