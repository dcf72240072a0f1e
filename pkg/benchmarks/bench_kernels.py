#!/usr/bin/env python3
"""Time the numba kernels against the numpy fallback, and sweep the regularizer weight.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --points 20000 50000 --repeat 5 --output bench.json
    python benchmarks/bench_kernels.py --sweep 0 0.001 0.01 0.1 1 --trials 8
"""

import argparse
import json
import time

import numpy as np

from regnf.kernels import NUMBA_AVAILABLE, _numpy
from regnf.coarse import radius_neighbors

if NUMBA_AVAILABLE:
    from regnf.kernels import _numba


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_trilinear(n_points, repeat, rng):
    n = 64
    values = rng.normal(size=(n, n, n)).astype(np.float32)
    origin, spacing = np.zeros(3), np.full(3, 1.0 / (n - 1))
    pts = rng.uniform(0.0, 1.0, size=(n_points, 3))
    row = {"kernel": "trilinear", "n": n_points,
           "numpy_s": best_of(lambda: _numpy.trilinear(values, origin, spacing, pts), repeat)}
    if NUMBA_AVAILABLE:
        _numba.trilinear(values, origin, spacing, pts[:10])
        row["numba_s"] = best_of(lambda: _numba.trilinear(values, origin, spacing, pts), repeat)
        a = _numpy.trilinear(values, origin, spacing, pts)
        b = _numba.trilinear(values, origin, spacing, pts)
        row["max_abs_diff"] = float(max(np.abs(a[0] - b[0]).max(), np.abs(a[1] - b[1]).max()))
    return row


def bench_fpfh(n_points, repeat, rng):
    pts = rng.normal(size=(n_points, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    nrm = pts.copy()
    ptr, idx = radius_neighbors(pts, 4.0 / np.sqrt(n_points))

    def run(mod):
        return mod.fpfh_accumulate(mod.spfh_histograms(pts, nrm, ptr, idx), pts, ptr, idx)

    row = {"kernel": "fpfh", "n": n_points, "neighbors": int(len(idx)), "numpy_s": best_of(lambda: run(_numpy), repeat)}
    if NUMBA_AVAILABLE:
        run(_numba)
        row["numba_s"] = best_of(lambda: run(_numba), repeat)
        row["max_abs_diff"] = float(np.abs(run(_numpy) - run(_numba)).max())
    return row


def regularizer_sweep(weights, trials, seed):
    """Median final errors per regularizer weight on seeded known-transform trials."""
    from regnf.config import RegistrationConfig
    from regnf.fine import OptimizerConfig
    from regnf.harness.benchmark import generate_benchmark, run_benchmark

    library = {"box": {"kind": "box", "half_extents": [0.6, 0.4, 0.25]},
               "torus": {"kind": "torus", "major_radius": 0.5, "minor_radius": 0.15}}
    spec = {"library": library, "scenes_per_level": trials}
    rows = []
    for w in weights:
        suite = generate_benchmark(seed, spec)
        run_benchmark(suite, RegistrationConfig(optimizer=OptimizerConfig(regularizer_weight=w)))
        fin = [r["errors"]["final"] for r in suite.results.values() if r.get("errors")]
        rows.append({"w": w, "n": len(fin),
                     "delta_t": float(np.median([e["delta_t"] for e in fin])),
                     "delta_R_sym": float(np.median([e["delta_R_sym_rad"] for e in fin])),
                     "delta_s": float(np.median([e["delta_s"] for e in fin]))})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--points", type=int, nargs="+", default=[10_000, 100_000])
    ap.add_argument("--fpfh-points", type=int, nargs="+", default=[1_000, 4_000])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--sweep", type=float, nargs="*", default=None,
                    help="regularizer weights to sweep (skipped when absent)")
    ap.add_argument("--trials", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--output", default=None)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    rows = [bench_trilinear(n, args.repeat, rng) for n in args.points]
    rows += [bench_fpfh(n, args.repeat, rng) for n in args.fpfh_points]
    print(f"numba available: {NUMBA_AVAILABLE}")
    print(f"{'kernel':10s} {'n':>8s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s} {'max diff':>10s}")
    for r in rows:
        nb = r.get("numba_s")
        speed = f"{r['numpy_s'] / nb:8.1f}" if nb else "       -"
        print(f"{r['kernel']:10s} {r['n']:8d} {r['numpy_s']:10.4f} {nb or float('nan'):10.4f} {speed} "
              f"{r.get('max_abs_diff', float('nan')):10.2e}")
    out = {"kernels": rows}
    if args.sweep is not None:
        weights = args.sweep or [0.0, 0.001, 0.01, 0.1, 1.0]
        out["regularizer_sweep"] = regularizer_sweep(weights, args.trials, args.seed)
        print(f"\n{'w':>8s} {'delta_t':>10s} {'dR_sym':>10s} {'delta_s':>10s}")
        for r in out["regularizer_sweep"]:
            print(f"{r['w']:8.3g} {r['delta_t']:10.2e} {r['delta_R_sym']:10.2e} {r['delta_s']:10.2e}")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
