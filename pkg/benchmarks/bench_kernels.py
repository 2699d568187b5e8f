#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times the 3D convolution forward/backward kernels and trilinear resampling
on training-representative tensor sizes, prints a table with the speedup of
the numba backend, and verifies both backends agree numerically.
"""

import argparse
import time

import numpy as np

from pgps.kernels import numba_backend, numpy_backend


def timeit(fn, repeats):
    fn()  # warm-up (JIT compile / cache load)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, make_args, repeats):
    rows = []
    for label, kernel_name in [
        ("conv fwd", "conv3d_forward"),
        ("conv grad-in", "conv3d_grad_input"),
        ("conv grad-w", "conv3d_grad_weights"),
    ]:
        args = make_args(kernel_name)
        np_fn = getattr(numpy_backend, kernel_name)
        nb_fn = getattr(numba_backend, kernel_name)
        ref = np_fn(*args)
        got = nb_fn(*args)
        if isinstance(ref, tuple):
            for r, g in zip(ref, got):
                np.testing.assert_allclose(r, g, rtol=1e-10, atol=1e-10)
        else:
            np.testing.assert_allclose(ref, got, rtol=1e-10, atol=1e-10)
        t_np = timeit(lambda: np_fn(*args), repeats)
        t_nb = timeit(lambda: nb_fn(*args), repeats)
        rows.append((f"{name} {label}", t_np, t_nb))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    gen = np.random.default_rng(0)
    cases = []
    for case_name, batch, ch, dims, stride in [
        ("2x8ch 32^3 s1", 2, 8, (32, 32, 32), (1, 1, 1)),
        ("2x8ch 32^3 s2", 2, 8, (32, 32, 32), (2, 2, 2)),
        ("64x8ch 8^3 s1", 64, 8, (8, 8, 8), (1, 1, 1)),
    ]:
        x = gen.normal(size=(batch, ch, *dims))
        w = gen.normal(size=(ch, ch, 3, 3, 3))
        b = gen.normal(size=ch)
        y = numpy_backend.conv3d_forward(x, w, b, stride)
        gy = gen.normal(size=y.shape)

        def make_args(kernel_name, x=x, w=w, b=b, gy=gy, stride=stride):
            if kernel_name == "conv3d_forward":
                return (x, w, b, stride)
            if kernel_name == "conv3d_grad_input":
                return (gy, w, stride, x.shape[2:])
            return (gy, x, w.shape, stride)

        cases.extend(bench_case(case_name, make_args, args.repeats))

    vol = gen.normal(size=(32, 32, 32))
    np.testing.assert_allclose(
        numpy_backend.trilinear_resample(vol, (12, 20, 8)),
        numba_backend.trilinear_resample(vol, (12, 20, 8)),
        rtol=1e-10, atol=1e-10,
    )
    cases.append((
        "trilinear 32^3 -> 12x20x8",
        timeit(lambda: numpy_backend.trilinear_resample(vol, (12, 20, 8)), args.repeats),
        timeit(lambda: numba_backend.trilinear_resample(vol, (12, 20, 8)), args.repeats),
    ))

    width = max(len(name) for name, _, _ in cases)
    print(f"{'kernel':{width}s}  {'numpy':>10s}  {'numba':>10s}  {'speedup':>8s}")
    for name, t_np, t_nb in cases:
        print(f"{name:{width}s}  {t_np*1e3:8.2f}ms  {t_nb*1e3:8.2f}ms  {t_np/t_nb:7.2f}x")


if __name__ == "__main__":
    main()
