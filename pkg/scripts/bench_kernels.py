"""Time the conv3d paths (flat stride-1 kernel vs im2col GEMM) on backbone-sized layers.

    python scripts/bench_kernels.py --repeat 3
"""
import argparse
import time

import numpy as np

from tsnodule.tensor import ConvSpec, conv3d_backward, conv3d_forward

LAYERS = [
    ("stem 1->8 @32", ConvSpec(1, 8, 3, 1, 1), (4, 1, 32, 32, 32)),
    ("stage1 8->8 @32", ConvSpec(8, 8, 3, 1, 1), (4, 8, 32, 32, 32)),
    ("stage2 8->16 s2 @32", ConvSpec(8, 16, 3, 2, 1), (4, 8, 32, 32, 32)),
    ("stage3 32->32 @8", ConvSpec(32, 32, 3, 1, 1), (4, 32, 8, 8, 8)),
    ("default stage1 64->64 @32", ConvSpec(64, 64, 3, 1, 1), (1, 64, 32, 32, 32)),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'layer':28s} {'forward ms':>11s} {'backward ms':>12s}")
    for name, spec, shape in LAYERS:
        x = rng.standard_normal(shape).astype(np.float32)
        w = rng.standard_normal(spec.weight_shape).astype(np.float32)
        y = conv3d_forward(x, w, None, spec)  # compile outside the timing
        g = np.ones_like(y)
        conv3d_backward(g, x, w, spec)
        fwd = best_of(lambda: conv3d_forward(x, w, None, spec), args.repeat)
        bwd = best_of(lambda: conv3d_backward(g, x, w, spec), args.repeat)
        print(f"{name:28s} {1e3 * fwd:11.1f} {1e3 * bwd:12.1f}")


if __name__ == "__main__":
    main()
