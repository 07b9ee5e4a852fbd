"""Time the numba and numpy kernel flavors side by side.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per (kernel, size) with the best-of-N time of each backend
and the speedup, and checks that both flavors agree.
"""
import argparse
import time

import numpy as np

from diskill import kernels
from diskill._jit import HAS_NUMBA
from diskill.nn import n_params


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    for dims, B in (([2, 16, 16, 1], 512), ([2, 32, 32, 10], 64), ([2, 32, 32, 10], 512), ([3, 32, 32, 1], 5000)):
        d = np.asarray(dims, dtype=np.int64)
        p = rng.normal(size=n_params(dims)) * 0.3
        X = rng.normal(size=(B, dims[0]))
        acts = kernels.NUMPY_KERNELS["dense_forward"](p, d, X)
        g = rng.normal(size=(B, dims[-1]))
        tag = f"{'x'.join(map(str, dims))} B={B}"
        yield "dense_forward", tag, (p, d, X)
        yield "dense_backward", tag, (p, d, acts, g)
    for B, T, J in ((64, 200, 2), (512, 200, 2), (512, 100, 2), (128, 200, 5)):
        q = np.cumsum(rng.normal(size=(B, T, J)) * 0.01, axis=1)
        dq = np.zeros_like(q)
        dq[:, 1:] = np.diff(q, axis=1) / 0.01
        yield "pd_rollout", f"B={B} T={T} J={J}", (q, dq, np.zeros((B, J)), 100.0, 20.0, 10.0, 0.01)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<15} {'case':<24} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, tag, a in cases(rng):
        ref = kernels.NUMPY_KERNELS[name](*a)
        out = kernels.NUMBA_KERNELS[name](*a)
        for r, o in zip(ref if isinstance(ref, tuple) else (ref,), out if isinstance(out, tuple) else (out,)):
            np.testing.assert_allclose(o, r, rtol=1e-9, atol=1e-10)
        t_np = best_of(kernels.NUMPY_KERNELS[name], a, args.repeat)
        t_nb = best_of(kernels.NUMBA_KERNELS[name], a, args.repeat)
        print(f"{name:<15} {tag:<24} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
