#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Times im2col/col2im (the conv gather/scatter) and a full conv2d
forward+backward through the engine, over training-representative shapes.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from polyforge._kernels import _fallback

try:
    from polyforge._kernels import _native
except ImportError:
    _native = None

SHAPES = [
    (8, 16, 32, 32),
    (8, 32, 16, 16),
    (25, 16, 40, 40),
    (4, 64, 8, 8),
]


def _time(fn, reps=10):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_gather(impl, x, cols):
    n, c, h, w = x.shape
    t_i = _time(lambda: impl.im2col(x, 3, "zero"))
    t_c = _time(lambda: impl.col2im(cols, n, c, h, w, 3, "zero"))
    return t_i, t_c


def bench_conv(x, w, b):
    from polyforge.denoiser import engine as eng

    def run():
        xv = eng.Var(x, requires=True)
        out = eng.conv2d(xv, eng.Var(w, requires=True), eng.Var(b, requires=True))
        eng.backward(eng.mean(eng.mul(out, out)))

    return _time(run, reps=5)


def main():
    rng = np.random.default_rng(0)
    print(f"{'shape (N,C,H,W)':>18} | {'im2col f/n':>15} | {'col2im f/n':>15} | "
          f"{'conv fwd+bwd f/n':>18} | speedup")
    for shape in SHAPES:
        n, c, h, w = shape
        x = rng.normal(size=shape).astype(np.float32)
        cols = rng.normal(size=(c * 9, n * h * w)).astype(np.float32)
        wt = rng.normal(size=(c, c, 3, 3)).astype(np.float32)
        bs = np.zeros(c, dtype=np.float32)

        fi, fc = bench_gather(_fallback, x, cols)
        import polyforge._kernels as K

        if _native is None:
            print(f"{str(shape):>18} | native extension not built; fallback only: "
                  f"im2col {fi*1e3:.2f}ms col2im {fc*1e3:.2f}ms")
            continue
        ni, nc = bench_gather(_native, x, cols)

        K.im2col, K.col2im = _fallback.im2col, _fallback.col2im
        tf = bench_conv(x, wt, bs)
        K.im2col, K.col2im = _native.im2col, _native.col2im
        tn = bench_conv(x, wt, bs)
        K.im2col, K.col2im = (_native.im2col, _native.col2im)

        print(f"{str(shape):>18} | {fi*1e3:6.2f}/{ni*1e3:6.2f}ms | "
              f"{fc*1e3:6.2f}/{nc*1e3:6.2f}ms | {tf*1e3:7.2f}/{tn*1e3:7.2f}ms | "
              f"{tf/tn:4.2f}x")


if __name__ == "__main__":
    main()
