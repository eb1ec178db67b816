"""Time the numba and numpy paths of the hot kernels side by side.

    python3 benchmarks/bench_kernels.py [--N 50] [--repeat 200]
"""
import argparse
import math
import timeit

import numpy as np

from drmpc import kernels
from drmpc._jit import USE_NUMBA


def _block(rng, N, m=4):
    return 0.3 * rng.normal(size=(N, m))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=50, help="samples per block")
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    A = _block(rng, args.N)
    losses = np.maximum(rng.normal(size=args.N), 0.0)
    r = 1.0 / math.sqrt(2.0)
    cases = {
        "simplex_ball": (kernels._simplex_ball_batch_nb, kernels._simplex_ball_batch_np, (A, r)),
        "cvar": (kernels._cvar_nb, kernels._cvar_np, (losses, 0.95)),
        "dr_block": (kernels._dr_block_nb, kernels._dr_block_np, (A, 0.01, 0.95, kernels.R_TOL)),
    }
    print(f"numba active: {USE_NUMBA}   N={args.N}   repeat={args.repeat}")
    print(f"{'kernel':<14}{'numba us':>12}{'numpy us':>12}{'speedup':>10}")
    for name, (f_nb, f_np, a) in cases.items():
        f_nb(*a)  # compile outside the timing
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=args.repeat, repeat=3)) / args.repeat * 1e6
        t_np = min(timeit.repeat(lambda: f_np(*a), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:<14}{t_nb:>12.1f}{t_np:>12.1f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
