"""Build+query timings of the compiled and pure-Python kd-tree backends.

Usage: python3 benchmarks/bench_kdtree.py [--sizes 2000,20000] [--dim 2] [--out bench.csv]

Queries are delta=3 Gaussian draws around the points, as in epi-set
construction. Results are checked against each other before timing is
reported.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from epiout import kdtree


def time_backend(backend, points, queries, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        idx, d2 = kdtree.KdTree(points, backend=backend).query(queries, squared=True)
        best = min(best, time.perf_counter() - t0)
    return best, idx, d2


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="2000,20000")
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="CSV path (default: stdout)")
    args = ap.parse_args(argv)

    backends = [b for b in ("compiled", "python") if b in kdtree.BACKENDS]
    rng = np.random.default_rng(args.seed)
    rows = []
    for n in (int(s) for s in args.sizes.split(",")):
        pts = rng.standard_normal((n, args.dim))
        qs = np.repeat(pts, 3, axis=0) + rng.standard_normal((3 * n, args.dim))
        ref = None
        for b in backends:
            sec, idx, d2 = time_backend(b, pts, qs, args.repeats)
            if ref is None:
                ref = (idx, d2)
            elif not (np.array_equal(idx, ref[0]) and np.array_equal(d2, ref[1])):
                print(f"backend {b} disagrees at n={n}", file=sys.stderr)
                return 1
            rows.append((b, n, args.dim, len(qs), sec))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["backend", "n_points", "dim", "n_queries", "seconds"])
    for b, n, d, q, sec in rows:
        w.writerow([b, n, d, q, f"{sec:.6f}"])
    by = {(b, n): s for b, n, _, _, s in rows}
    if len(backends) == 2:
        for n in sorted({n for _, n, *_ in rows}):
            print(f"# n={n}: python/compiled = {by['python', n] / by['compiled', n]:.1f}x",
                  file=sys.stderr)
    if args.out:
        fh.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
