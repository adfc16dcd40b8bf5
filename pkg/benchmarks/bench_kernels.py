"""Time the compiled and numpy im2col/col2im kernels on the encoder's layer shapes.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from leakbench import _kernels_py

try:
    from leakbench import _ckernels
except ImportError:
    _ckernels = None

# (batch, channels, size, kernel, stride, pad) for the four encoder convolutions at batch 64
LAYERS = [
    (64, 1, 32, 3, 1, 1),
    (64, 8, 32, 3, 2, 1),
    (64, 8, 16, 3, 1, 1),
    (64, 16, 16, 3, 2, 1),
]


def bench(mod, repeat):
    rows = []
    rng = np.random.default_rng(0)
    for n, c, size, k, s, p in LAYERS:
        x = rng.normal(size=(n, c, size, size))
        cols = mod.im2col(x, k, k, s, p)
        g = rng.normal(size=np.shape(cols))
        t_fwd = min(timeit.repeat(lambda: mod.im2col(x, k, k, s, p), number=5, repeat=repeat)) / 5
        t_bwd = min(timeit.repeat(lambda: mod.col2im(g, x.shape, k, k, s, p), number=5, repeat=repeat)) / 5
        rows.append((f"{c}x{size}x{size} s{s}", t_fwd, t_bwd))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    py = bench(_kernels_py, args.repeat)
    cy = bench(_ckernels, args.repeat) if _ckernels is not None else None
    print(f"{'layer':<16s} {'im2col py':>10s} {'im2col cy':>10s} {'col2im py':>10s} {'col2im cy':>10s}  (ms)")
    for i, (name, f, b) in enumerate(py):
        cf = f"{cy[i][1] * 1e3:10.3f}" if cy else f"{'n/a':>10s}"
        cb = f"{cy[i][2] * 1e3:10.3f}" if cy else f"{'n/a':>10s}"
        print(f"{name:<16s} {f * 1e3:10.3f} {cf} {b * 1e3:10.3f} {cb}")
    if cy:
        tp = sum(f + b for _, f, b in py)
        tc = sum(f + b for _, f, b in cy)
        print(f"total speed-up: {tp / tc:.2f}x")
    else:
        print("compiled kernels not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
