"""Step time and peak memory of SPIN and the quadratic baseline against n.

    SPIN_NUM_THREADS=1 python3 scripts/scaling.py --out results/bench
"""
import argparse
import json
from pathlib import Path

from spin.evalbench.bench import DEFAULT_GRID, bench_scaling, write_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/bench")
    ap.add_argument("--grid", default=",".join(map(str, DEFAULT_GRID)))
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()

    grid = [int(n) for n in args.grid.split(",")]
    records, summary = bench_scaling(grid=grid, steps=args.steps)
    write_report(records, summary, Path(args.out), plots=True)
    for r in records:
        print(f"{r.method:10s} n={r.n:6d} step={r.step_time:8.3f}s peak={r.peak_bytes / 2**20:8.1f}MiB "
              f"latency={r.latency * 1e6:7.1f}us status={r.status}")
    print(json.dumps({m: {"exponent": s["exponent"], "r2": s["r2"]} for m, s in summary.items()}, indent=2))


if __name__ == "__main__":
    main()
