"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Reports the best-of-N wall time per kernel and the max abs difference
between the two backends on identical inputs.
"""
import argparse
import time

import numpy as np

from mbdepth import _kernels
from mbdepth.image import make_patch_kernel


def best_time(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--samples", type=int, default=4096)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    H, W, n, k = 360, 480, args.samples, 11
    img_q = rng.random((H, W, 3)).astype(np.float32)
    img_r = rng.random((H, W, 3)).astype(np.float32)
    u = rng.uniform(k, W - 1 - k, n)
    v = rng.uniform(k, H - 1 - k, n)
    kern = make_patch_kernel(k)
    wexp = _kernels.expand_weights(kern.weights, k, 3)
    du = kern.offsets[:, 0].astype(np.float64)
    dv = kern.offsets[:, 1].astype(np.float64)
    plane = rng.random((H, W))

    cases = {
        "bilinear": (
            lambda: _kernels.bilinear_nb(img_q, u, v),
            lambda: _kernels.bilinear_np(img_q, u, v),
        ),
        "patch_gather": (
            lambda: _kernels.patch_gather_nb(img_q, u, v, du, dv),
            lambda: _kernels.patch_gather_np(img_q, u, v, du, dv),
        ),
        "patch_loss": (
            lambda: _kernels.patch_loss_nb(img_q, img_r, u, v, u + 0.4, v - 0.3, k, wexp),
            lambda: _kernels.patch_loss_np(img_q, img_r, u, v, u + 0.4, v - 0.3, k, wexp),
        ),
        "splat": (
            lambda: _kernels.splat_nb(H, W, u, v, u),
            lambda: _kernels.splat_np(H, W, u, v, u),
        ),
        "median5": (
            lambda: _kernels.median5_nb(plane),
            lambda: _kernels.median5_np(plane),
        ),
    }
    print(f"{'kernel':<14}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}{'max|diff|':>12}")
    for name, (fast, slow) in cases.items():
        a, b = fast(), slow()
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))
        tf = best_time(fast, args.repeat)
        ts = best_time(slow, args.repeat)
        print(f"{name:<14}{tf * 1e3:>12.2f}{ts * 1e3:>12.2f}{ts / tf:>9.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
