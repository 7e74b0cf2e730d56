"""Benchmark: compiled convolution kernels vs the pure-numpy fallback.

Runs forward, input-gradient, and weight-gradient kernels on a few
representative shapes and reports best-of-k wall times plus the speedup of
the compiled extension. Usage: python benchmarks/bench_conv.py [--repeats K]
"""

import argparse
import time

import numpy as np

from cactus._kernels import conv_py

try:
    from cactus._kernels import _conv_cy
except ImportError:
    _conv_cy = None

CASES = [
    # (label, N, C, H, W, O, KH, KW, stride, pad)
    ("mnist-ish 1->16 k3", 8, 1, 28, 28, 16, 3, 3, 1, 1),
    ("mid 16->32 k3", 8, 16, 14, 14, 32, 3, 3, 1, 1),
    ("strided 32->64 k3 s2", 8, 32, 14, 14, 64, 3, 3, 2, 1),
    ("wide 3->64 k5", 4, 3, 32, 32, 64, 5, 5, 1, 2),
]


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if _conv_cy is None:
        print("compiled extension not built (pip install -e . builds it); nothing to compare")
        return

    rng = np.random.default_rng(0)
    header = f"{'case':<22} {'kernel':<10} {'numpy ms':>9} {'cython ms':>9} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, n, c, h, w, o, kh, kw, s, p in CASES:
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, kh, kw))
        ho = (h + 2 * p - kh) // s + 1
        wo = (w + 2 * p - kw) // s + 1
        g = rng.standard_normal((n, o, ho, wo))

        kernels = [
            ("forward", lambda m: m.conv2d_forward(x, wt, s, s, p, p)),
            ("grad_x", lambda m: m.conv2d_backward_x(g, wt, h, w, s, s, p, p)),
            ("grad_w", lambda m: m.conv2d_backward_w(g, x, kh, kw, s, s, p, p)),
        ]
        for kname, call in kernels:
            ref = call(conv_py)
            got = call(_conv_cy)
            assert np.allclose(ref, got, rtol=1e-10, atol=1e-12), f"{label}/{kname} mismatch"
            t_py = best_of(lambda: call(conv_py), args.repeats)
            t_cy = best_of(lambda: call(_conv_cy), args.repeats)
            print(f"{label:<22} {kname:<10} {t_py * 1e3:>9.2f} {t_cy * 1e3:>9.2f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
