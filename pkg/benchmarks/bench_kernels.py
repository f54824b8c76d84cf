"""Times the numpy and numba kernel backends side by side.

Run from the repository root:

    python3 benchmarks/bench_kernels.py --batch 4096 --rays 200000

The numba path is compiled on first call; a warmup round is executed
before timing so the table reflects steady-state cost.  When numba is
unavailable (or disabled via SL4SLAM_NUMBA=0) only the numpy column is
reported.
"""

import argparse
import time

import numpy as np

from sl4slam import kernels


def best_of(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def make_workloads(batch, rays, seed=0):
    rng = np.random.default_rng(seed)
    tangents = rng.normal(scale=0.2, size=(batch, 4, 4))
    traces = np.trace(tangents, axis1=1, axis2=2) / 4.0
    tangents -= traces[:, None, None] * np.eye(4)
    group = kernels.expm44_many_numpy(tangents)

    dirs = rng.normal(size=(rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    scene = {
        "origin": np.array([5.0, 4.0, 1.5]),
        "dirs": dirs,
        "room": np.array([0.0, 0.0, 0.0, 10.0, 8.0, 3.0]),
        "spheres": np.array([[2.0, 2.0, 1.0, 0.6],
                             [7.5, 6.0, 1.2, 0.8],
                             [5.0, 1.5, 0.7, 0.5]]),
        "boxes": np.array([[1.0, 5.5, 0.0, 2.2, 6.8, 1.8],
                           [7.8, 1.2, 0.0, 9.0, 2.4, 1.1]]),
    }
    ray_args = (scene["origin"], scene["dirs"], scene["room"],
                scene["spheres"], scene["boxes"])
    return [
        ("expm44_many", (tangents,),
         kernels.expm44_many_numpy, kernels.expm44_many_numba),
        ("logm44_many", (group,),
         kernels.logm44_many_numpy, kernels.logm44_many_numba),
        ("raycast", ray_args,
         kernels.raycast_numpy, kernels.raycast_numba),
    ]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=4096,
                        help="matrix stack size for expm/logm")
    parser.add_argument("--rays", type=int, default=200000,
                        help="ray count for the raycast kernel")
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions; the best is reported")
    args = parser.parse_args(argv)

    have_numba = kernels.expm44_many_numba is not None
    if not have_numba:
        print("numba backend unavailable "
              "(not installed or disabled by SL4SLAM_NUMBA=0)")

    print("active dispatch: %s" % ("numba" if kernels.USING_NUMBA else "numpy"))
    print("%-14s %10s %12s %12s %9s"
          % ("kernel", "size", "numpy ms", "numba ms", "speedup"))
    for name, call_args, fn_numpy, fn_numba in make_workloads(
            args.batch, args.rays):
        size = (call_args[1].shape[0] if name == "raycast"
                else call_args[0].shape[0])
        t_np = best_of(fn_numpy, call_args, args.repeats)
        if have_numba:
            fn_numba(*call_args)  # warmup / jit compile
            t_nb = best_of(fn_numba, call_args, args.repeats)
            print("%-14s %10d %12.2f %12.2f %8.1fx"
                  % (name, size, 1e3 * t_np, 1e3 * t_nb, t_np / t_nb))
        else:
            print("%-14s %10d %12.2f %12s %9s"
                  % (name, size, 1e3 * t_np, "-", "-"))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
