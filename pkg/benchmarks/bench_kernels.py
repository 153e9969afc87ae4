"""Compare the numba and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--n 20000] [--knots 200] [--repeat 5]

Each kernel is run once to warm up (and trigger JIT compilation), then timed
as the best of ``--repeat`` runs. Outputs of the two backends are checked
against each other before timing.
"""

import argparse
import time

import numpy as np

from mamm.kernels import _numba, _numpy


def best_of(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, L, seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    knots = rng.random((L, 2))
    r = 0.1
    col_mean = rng.random(L)
    proj = rng.standard_normal((L, L - 1))
    mst_pts = pts[: min(n, 3000)]
    return {
        "kernel_matrix": lambda m: m.kernel_matrix(pts[:2000], knots, r),
        "nystrom_rows": lambda m: m.nystrom_rows(pts, knots, r, col_mean, proj),
        "kmeans_assign": lambda m: m.kmeans_assign(pts, knots),
        "mst_max_edge": lambda m: m.mst_max_edge(mst_pts),
        "kernel_offdiag_sum": lambda m: m.kernel_offdiag_sum(pts[:5000], r),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--knots", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    print(f"{'kernel':<20}{'numba s':>12}{'numpy s':>12}{'speedup':>10}  agree")
    for name, run in cases(args.n, args.knots, args.seed).items():
        agree = _same(run(_numba), run(_numpy))
        t_nb = best_of(lambda: run(_numba), args.repeat)
        t_np = best_of(lambda: run(_numpy), args.repeat)
        print(f"{name:<20}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>10.2f}  {agree}")


if __name__ == "__main__":
    main()
