#!/usr/bin/env python3
"""Time the compiled top-k kernel against the numpy reference.

The neighbor-selection kernel dominates episode cost once descriptors are
embedded: every query row ranks every pooled support row per class. Shapes
below mirror real episodes (rows x pool) plus one oversized stress case.

Run after building the extension:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 50
"""

import argparse
import time

import numpy as np

from descsel.kernels import BACKEND, reference

try:
    from descsel.kernels import _topk as compiled
except ImportError:
    compiled = None

SHAPES = [
    # (rows, pool, k) -- small: 5-way 1-shot, big: 10-way 5-shot, stress
    (36, 36, 1),
    (180, 36, 3),
    (540, 180, 3),
    (2000, 2000, 5),
]


def bench(fn, sims, k, exclude, repeats):
    fn(sims, k, exclude)  # warm cache, touch any lazy setup
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(sims, k, exclude)
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if compiled is None:
        print("compiled extension not built; only the reference backend exists")
        print("(pip install -e . --no-build-isolation to build it)")
        return

    rng = np.random.default_rng(args.seed)
    print(f"default backend at import time: {BACKEND}")
    print(f"{'rows':>6} {'pool':>6} {'k':>3} {'reference':>12} {'cython':>12} {'speedup':>8}")
    for rows, pool, k in SHAPES:
        sims = rng.standard_normal((rows, pool))
        exclude = rng.integers(-1, pool, size=rows)
        ref_idx = reference.topk_indices(sims, k, exclude.astype(np.int64))
        cy_idx = compiled.topk_indices(np.ascontiguousarray(sims), k,
                                       np.ascontiguousarray(exclude, dtype=np.int64))
        if not np.array_equal(ref_idx, cy_idx):
            raise SystemExit(f"backend mismatch at shape ({rows},{pool},k={k})")
        t_ref = bench(lambda s, kk, e: reference.topk_indices(s, kk, e),
                      sims, k, exclude.astype(np.int64), args.repeats)
        t_cy = bench(lambda s, kk, e: compiled.topk_indices(
            np.ascontiguousarray(s), kk, np.ascontiguousarray(e, dtype=np.int64)),
            sims, k, exclude, args.repeats)
        print(f"{rows:>6} {pool:>6} {k:>3} {t_ref * 1e6:>10.1f}us {t_cy * 1e6:>10.1f}us "
              f"{t_ref / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
