"""Time the numba and pure-numpy versions of each hot kernel.

    python benchmarks/bench_kernels.py [--repeat N]

The first numba call (compilation) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from xpfl import _jit, kernels


def cases(rng):
    x = rng.standard_normal((16, 8, 16, 16))
    yield "im2col", (x, 3, 3, 1)
    yield "col2im", (rng.standard_normal((16, 256, 72)), x.shape, 3, 3, 1)
    pts = rng.standard_normal((200, 32))
    D2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    yield "perplexity", (D2, 30.0, 1e-5, 200)
    P = rng.random((200, 200))
    P = P + P.T
    np.fill_diagonal(P, 0)
    yield "tsne_grad", (rng.standard_normal((200, 2)), P / P.sum(), 1.0)
    yield "split_scan", (np.round(rng.random((500, 16)), 3), rng.integers(0, 10, 500), 10, 3)


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _jit.HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, a in cases(rng):
        f_np, f_nb = kernels.implementation(name, "numpy"), kernels.implementation(name, "numba")
        f_nb(*a)  # compile
        t_np, t_nb = best_of(f_np, a, args.repeat), best_of(f_nb, a, args.repeat)
        print(f"{name:<12}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>10.1f}x")


if __name__ == "__main__":
    main()
