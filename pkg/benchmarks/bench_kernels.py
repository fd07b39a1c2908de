#!/usr/bin/env python
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Each kernel is timed in both variants on the same inputs after a warmup
(which also absorbs JIT compilation), and results are checked to agree.

Usage:
    python benchmarks/bench_kernels.py [--iters 200] [--rows 512] [--cols 256]
"""

import argparse
import time

import numpy as np

from volreport import backend, kernels


def timeit(fn, iters):
    fn()  # warmup / compile
    fn()
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return (time.perf_counter() - t0) / iters * 1e3  # ms


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--rows", type=int, default=512)
    ap.add_argument("--cols", type=int, default=256)
    args = ap.parse_args()

    if not backend.NUMBA_AVAILABLE:
        print("numba not importable; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    m, n = args.rows, args.cols
    x = rng.normal(size=(m, n))
    gy = rng.normal(size=(m, n))
    gain = rng.normal(size=n)
    bias = rng.normal(size=n)
    ids = rng.integers(0, 64, size=m).astype(np.int64)
    p = rng.normal(size=m * n)
    g = rng.normal(size=m * n)
    mom = np.zeros(m * n)
    vel = np.zeros(m * n)
    src = rng.normal(size=(16, 64, 64))
    out_shape = (32, 96, 96)
    scales = tuple((s - 1) / (t - 1) for s, t in zip(src.shape, out_shape))
    seq_a = rng.integers(0, 30, size=400).astype(np.int64)
    seq_b = rng.integers(0, 30, size=400).astype(np.int64)

    y = kernels.softmax_rows_np(x)
    ls = kernels.log_softmax_rows_np(x)
    _, xhat, inv = kernels.layer_norm_rows_np(x, gain, bias, 1e-5)

    cases = [
        ("softmax_rows", lambda: kernels.softmax_rows_np(x), lambda: kernels.softmax_rows_nb(x)),
        ("softmax_rows_grad", lambda: kernels.softmax_rows_grad_np(y, gy),
         lambda: kernels.softmax_rows_grad_nb(y, gy)),
        ("log_softmax_rows", lambda: kernels.log_softmax_rows_np(x),
         lambda: kernels.log_softmax_rows_nb(x)),
        ("log_softmax_rows_grad", lambda: kernels.log_softmax_rows_grad_np(ls, gy),
         lambda: kernels.log_softmax_rows_grad_nb(ls, gy)),
        ("layer_norm_rows", lambda: kernels.layer_norm_rows_np(x, gain, bias, 1e-5),
         lambda: kernels.layer_norm_rows_nb(x, gain, bias, 1e-5)),
        ("layer_norm_rows_grad", lambda: kernels.layer_norm_rows_grad_np(xhat, inv, gain, gy),
         lambda: kernels.layer_norm_rows_grad_nb(xhat, inv, gain, gy)),
        ("gelu", lambda: kernels.gelu_np(x), lambda: kernels.gelu_nb(x)),
        ("gelu_grad", lambda: kernels.gelu_grad_np(x, gy), lambda: kernels.gelu_grad_nb(x, gy)),
        ("scatter_add_rows", lambda: kernels.scatter_add_rows_np(np.zeros((64, n)), ids, gy),
         lambda: kernels.scatter_add_rows_nb(np.zeros((64, n)), ids, gy)),
        ("adamw_update",
         lambda: kernels.adamw_update_np(p.copy(), g, mom.copy(), vel.copy(),
                                         1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001),
         lambda: kernels.adamw_update_nb(p.copy(), g, mom.copy(), vel.copy(),
                                         1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)),
        ("resample_trilinear",
         lambda: kernels.resample_trilinear_np(src, out_shape, scales, (0.0, 0.0, 0.0)),
         lambda: kernels.resample_trilinear_nb(src, out_shape, scales, (0.0, 0.0, 0.0))),
        ("lcs_length", lambda: kernels.lcs_length_np(seq_a, seq_b),
         lambda: kernels.lcs_length_nb(seq_a, seq_b)),
    ]

    # agreement spot checks before timing
    assert np.allclose(kernels.softmax_rows_np(x), kernels.softmax_rows_nb(x))
    assert kernels.lcs_length_np(seq_a, seq_b) == int(kernels.lcs_length_nb(seq_a, seq_b))

    width = max(len(name) for name, _, _ in cases)
    print(f"selected backend: {backend.backend_name()}")
    print(f"{'kernel'.ljust(width)}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for name, np_fn, nb_fn in cases:
        t_np = timeit(np_fn, args.iters)
        t_nb = timeit(nb_fn, args.iters)
        print(f"{name.ljust(width)}  {t_np:10.4f}  {t_nb:10.4f}  {t_np / t_nb:7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
