"""Compiled vs numpy splat kernels, forward and backward.

    python benchmarks/bench_backends.py --n 1000 10000 100000 --json out.json
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from bevsplat.backend import BACKENDS
from bevsplat.gradients import splat_backward
from bevsplat.harness.bench import random_splat_case, time_call
from bevsplat.rasterizer import splat_forward


def run(ns, resolution, channels, k, reps, threads):
    rows = []
    for n in ns:
        rng = np.random.default_rng(n)
        batch, F = random_splat_case(rng, n, resolution, channels, k)
        d_out = rng.normal(size=(channels, resolution, resolution))
        row = {"n": n, "resolution": resolution, "channels": channels, "k": k}
        for name in sorted(BACKENDS):
            row[f"{name}_fwd_ms"] = time_call(lambda: splat_forward(batch, F, n_threads=threads, backend=name), reps)
            row[f"{name}_bwd_ms"] = time_call(
                lambda: splat_backward(batch, F, d_out, n_threads=threads, backend=name), reps
            )
        if "cython" in BACKENDS:
            row["fwd_speedup"] = row["python_fwd_ms"] / row["cython_fwd_ms"]
            row["bwd_speedup"] = row["python_bwd_ms"] / row["cython_bwd_ms"]
        rows.append(row)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--resolution", type=int, default=200)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--k", type=float, default=3.0)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--json", default=None, help="also write the rows here")
    args = ap.parse_args(argv)

    rows = run(args.n, args.resolution, args.channels, args.k, args.reps, args.threads)
    cols = [c for c in rows[0] if c not in ("resolution", "channels", "k")]
    print(f"# {args.resolution}x{args.resolution}, C={args.channels}, k={args.k}, median of {args.reps}")
    print("  ".join(f"{c:>14}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>14.2f}" if isinstance(r[c], float) else f"{r[c]:>14}" for c in cols))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
