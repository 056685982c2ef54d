"""Benchmark the numba conv2d kernels against the pure-numpy im2col path.

Usage: python3 benchmarks/bench_conv.py [--repeats N]

Shapes mirror what training actually runs: the two conv layers of the toy
CNN at batch size 32 (32x32x3 -> 8 channels, then 16x16x8 -> 16 channels).
The numba functions are called once before timing so JIT compilation is not
measured. Results also cross-check that both paths agree to float64
round-off.
"""

import argparse
import time

import numpy as np

from mrn import kernels

SHAPES = [
    # (label, batch, cin, size, cout, kernel)
    ("conv1 fwd/bwd", 32, 3, 34, 8, 3),   # 32x32 padded by 1
    ("conv2 fwd/bwd", 32, 8, 18, 16, 3),  # 16x16 padded by 1
]


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba path unavailable (MRN_NO_NUMBA set or numba "
                         "missing); nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'case':<16} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for label, b, cin, size, cout, k in SHAPES:
        xp = rng.standard_normal((b, cin, size, size))
        w = rng.standard_normal((cout, cin, k, k))
        gy = rng.standard_normal((b, cout, size - k + 1, size - k + 1))

        # warm up JIT and verify agreement
        y_nb = kernels.conv2d_forward_numba(xp, w)
        y_np = kernels.conv2d_forward_numpy(xp, w)
        assert np.allclose(y_nb, y_np, rtol=1e-12, atol=1e-12)
        gx_nb, gw_nb = kernels.conv2d_backward_numba(xp, w, gy)
        gx_np, gw_np = kernels.conv2d_backward_numpy(xp, w, gy)
        assert np.allclose(gx_nb, gx_np, rtol=1e-12, atol=1e-10)
        assert np.allclose(gw_nb, gw_np, rtol=1e-12, atol=1e-10)

        for phase, f_np, f_nb in [
            ("fwd", lambda: kernels.conv2d_forward_numpy(xp, w),
             lambda: kernels.conv2d_forward_numba(xp, w)),
            ("bwd", lambda: kernels.conv2d_backward_numpy(xp, w, gy),
             lambda: kernels.conv2d_backward_numba(xp, w, gy)),
        ]:
            t_np = timeit(f_np, args.repeats)
            t_nb = timeit(f_nb, args.repeats)
            name = label.split()[0] + " " + phase
            print(f"{name:<16} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
                  f"{t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
