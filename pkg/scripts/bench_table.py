#!/usr/bin/env python
"""Latency / memory / FLOP table of the aggregators over a range of set sizes.

    python scripts/bench_table.py --out results/bench
"""
import argparse
from pathlib import Path

from itcrwkv.bench import run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kinds", default="rwkv,self_attention,mean_pool,wkv_scan")
    ap.add_argument("--n", default="64,128,256,512,1024,2048,4096")
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--reps", type=int, default=30)
    ap.add_argument("--out", default="results/bench")
    args = ap.parse_args()

    kinds = args.kinds.split(",")
    n_values = [int(v) for v in args.n.split(",")]
    report = run_bench(kinds, n_values, d=args.d, heads=args.heads, reps=args.reps,
                       log=lambda r: print(f"{r.kind:>15} n={r.n:<5} {r.median_ms:9.3f} ms", flush=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "bench.csv")
    print(report.table())

    # growth between consecutive sizes, the quantity the O(n) vs O(n^2) claim is about
    print("\nmedian latency growth per size step")
    for kind in kinds:
        steps = [report.ratio(kind, b, a) for a, b in zip(n_values, n_values[1:])]
        print(f"{kind:>15}: " + "  ".join(f"{s:5.2f}" for s in steps))


if __name__ == "__main__":
    main()
