"""Time the numba and numpy paths of the hot kernels and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Numba timings exclude the first (compiling) call.
"""
import argparse
import time

import numpy as np

from mcsep import kernels
from mcsep._accel import NUMBA_INSTALLED


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    mics = np.c_[0.1 * np.cos(np.arange(6) * np.pi / 3), 0.1 * np.sin(np.arange(6) * np.pi / 3), np.zeros(6)] + [3.0, 2.5, 1.5]
    yield "image_source_rir", lambda b: kernels.image_source_rir(
        mics, np.array([1.2, 1.1, 1.6]), np.array([6.0, 5.0, 3.0]), 0.8, 8000, 4000, 12, backend=b
    )
    a = rng.standard_normal((4096, 6, 6)) + 1j * rng.standard_normal((4096, 6, 6))
    herm = a @ np.conj(np.swapaxes(a, -1, -2))
    yield "jacobi_eigh", lambda b: kernels.jacobi_eigh(herm, backend=b)[0]
    x = rng.standard_normal((2, 129, 300, 6)) + 1j * rng.standard_normal((2, 129, 300, 6))
    yield "windowed_outer_sum", lambda b: kernels.windowed_outer_sum(x, 3, backend=b)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not NUMBA_INSTALLED:
        print("numba not installed; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}{'max diff':>12}")
    for name, fn in cases(rng):
        t_np, ref = best_of(lambda: fn("numpy"), args.repeat)
        if not NUMBA_INSTALLED:
            print(f"{name:<20}{t_np:>12.4f}{'-':>12}{'-':>10}{'-':>12}")
            continue
        fn("numba")  # compile
        t_nb, out = best_of(lambda: fn("numba"), args.repeat)
        # eigenvalues come back in diagonal order from both paths
        diff = np.max(np.abs(np.sort(out, axis=-1) - np.sort(ref, axis=-1))) if name == "jacobi_eigh" else np.max(np.abs(out - ref))
        print(f"{name:<20}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.1f}{diff:>12.1e}")


if __name__ == "__main__":
    main()
