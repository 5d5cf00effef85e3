"""Benchmark the compiled kernels against the pure-numpy reference.

Times the four hot kernels (bilinear gather forward/backward and
emission-absorption compositing forward/backward) on training-sized
workloads and prints per-kernel speedups. Also cross-checks that both
backends agree to float tolerance on the benchmark inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from deformnvs.kernels import numpy_ref

try:
    from deformnvs.kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(rng):
    """(name, args) pairs sized like one training step's ray batch."""
    h, w, d = 32, 32, 40
    n = 512 * 32 * 6  # rays x samples x source views
    fmap = rng.standard_normal((h, w, d)).astype(np.float32)
    px = rng.uniform(-1.0, w, size=n).astype(np.float32)
    py = rng.uniform(-1.0, h, size=n).astype(np.float32)
    gout = rng.standard_normal((n, d)).astype(np.float32)

    rays, samples = 512, 32
    sigmas = rng.uniform(0.0, 40.0, size=(rays, samples)).astype(np.float32)
    weights, residual = numpy_ref.ea_forward(sigmas, 0.05)
    gw = rng.standard_normal((rays, samples)).astype(np.float32)
    gr = rng.standard_normal(rays).astype(np.float32)

    return [
        ("bilinear_forward", (fmap, px, py)),
        ("bilinear_backward", (fmap, px, py, gout)),
        ("ea_forward", (sigmas, 0.05)),
        ("ea_backward", (weights, residual, gw, gr, 0.05)),
    ]


def check_parity(name, args):
    a = getattr(numpy_ref, name)(*args)
    b = getattr(_ckernels, name)(*args)
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.abs(x - y).max()) for x, y in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20, help="timing repeats (best-of)")
    args = ap.parse_args()

    if _ckernels is None:
        print("compiled backend not available; build the package first "
              "(pip install -e . --no-build-isolation)")
        return

    rng = np.random.default_rng(0)
    cases = make_cases(rng)
    print(f"{'kernel':<20} {'numpy':>10} {'cython':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, case_args in cases:
        t_np = timeit(getattr(numpy_ref, name), case_args, args.repeats)
        t_cy = timeit(getattr(_ckernels, name), case_args, args.repeats)
        diff = check_parity(name, case_args)
        print(f"{name:<20} {t_np * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms "
              f"{t_np / t_cy:>7.1f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
