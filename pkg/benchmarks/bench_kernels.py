"""Time the conv and max-pool kernels under both backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row is the best of N timed calls after one warm-up call (which also
triggers numba compilation). Shapes mirror the desk-scale super-network.
"""
import argparse
import time

import numpy as np

from basenas.tensor import kernels

CASES = [
    # name, (B, Cin, Cout, H, k, stride, pad, dilation, groups)
    ("depthwise 3x3", (16, 8, 8, 16, 3, 1, 1, 1, 8)),
    ("depthwise 5x5 dil 2", (16, 8, 8, 16, 5, 1, 4, 2, 8)),
    ("pointwise 1x1", (16, 8, 8, 16, 1, 1, 0, 1, 1)),
    ("stem 3x3 stride 2", (16, 1, 8, 32, 3, 2, 1, 1, 1)),
    ("1x7 full", (16, 8, 8, 16, 7, 1, 3, 1, 1)),
]


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'pass':<8}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (B, ci, co, H, k, s, p, d, g) in CASES:
        x = rng.normal(size=(B, ci, H, H))
        w = rng.normal(size=(co, ci // g, k, k))
        a = ((s, s), (p, p), (d, d), g)
        gy = rng.normal(size=kernels.conv2d(x, w, *a).shape)
        passes = {
            "fwd": lambda be: kernels.conv2d(x, w, *a, backend=be),
            "dx": lambda be: kernels.conv2d_input_grad(gy, w, (H, H), *a, backend=be),
            "dw": lambda be: kernels.conv2d_weight_grad(x, gy, (k, k), *a, backend=be),
        }
        for pname, f in passes.items():
            tn = best_of(lambda: f("numba"), args.repeat)
            tp = best_of(lambda: f("numpy"), args.repeat)
            print(f"{name:<30}{pname:<8}{tn * 1e3:>10.3f}{tp * 1e3:>10.3f}{tp / tn:>8.1f}x")
    x = rng.normal(size=(16, 8, 16, 16))
    tn = best_of(lambda: kernels.maxpool_argmax(x, 3, 1, 1, backend="numba"), args.repeat)
    tp = best_of(lambda: kernels.maxpool_argmax(x, 3, 1, 1, backend="numpy"), args.repeat)
    print(f"{'max-pool 3x3':<30}{'argmax':<8}{tn * 1e3:>10.3f}{tp * 1e3:>10.3f}{tp / tn:>8.1f}x")


if __name__ == "__main__":
    main()
