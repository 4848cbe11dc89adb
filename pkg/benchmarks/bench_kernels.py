"""Timing comparison of the numba and numpy kernel implementations.

Run as:  python3 benchmarks/bench_kernels.py [--repeats N]

Expect a run to take a few minutes: the numpy nearest-neighbor fallback is a
chunked brute force and dominates the wall time at the full-size shapes.

For every hot kernel this measures both implementations on shapes taken from
the two presets (small maps as seen in desk training, large maps as seen in
full-resolution generation), verifies they agree numerically, and prints the
speedup. The winners justify the default dispatch in engine.kernels: the
conv family runs through BLAS-backed numpy, the irregular gather/scatter and
nearest-neighbor kernels through numba loops.
"""

import argparse
import time

import numpy as np

from pointdrape.engine import kernels


def _time(fn, repeats):
    fn()  # warm up (numba compilation, BLAS thread pools)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _agree(a, b):
    """Scale-aware agreement: float32 accumulation order differs between the
    loop and BLAS paths, so compare peak error against the value scale."""
    scale = max(float(np.abs(a).max()), 1e-30)
    return bool(np.abs(a - b).max() <= 1e-3 * scale)


def _row(name, numba_s, numpy_s, agree):
    ratio = numpy_s / numba_s
    winner = "numba" if ratio > 1 else "numpy"
    print(f"{name:<44} numba {numba_s * 1e3:9.2f} ms   numpy "
          f"{numpy_s * 1e3:9.2f} ms   x{max(ratio, 1 / ratio):6.1f} "
          f"{winner}   agree={agree}")


def bench_conv(rng, repeats, tag, b, ci, co, hw, k, stride, pad):
    x = rng.standard_normal((b, ci, hw, hw)).astype(np.float32)
    w = rng.standard_normal((co, ci, k, k)).astype(np.float32)
    ya = kernels.conv2d_forward_numba(x, w, stride, pad)
    yb = kernels.conv2d_forward_numpy(x, w, stride, pad)
    agree = _agree(ya, yb)
    ta = _time(lambda: kernels.conv2d_forward_numba(x, w, stride, pad), repeats)
    tb = _time(lambda: kernels.conv2d_forward_numpy(x, w, stride, pad), repeats)
    _row(f"conv2d fwd {tag}", ta, tb, agree)

    gy = ya.astype(np.float32)
    ga = kernels.conv2d_bwd_x_numba(gy, w, stride, pad, hw, hw)
    gb = kernels.conv2d_bwd_x_numpy(gy, w, stride, pad, hw, hw)
    agree = _agree(ga, gb)
    ta = _time(lambda: kernels.conv2d_bwd_x_numba(gy, w, stride, pad, hw, hw),
               repeats)
    tb = _time(lambda: kernels.conv2d_bwd_x_numpy(gy, w, stride, pad, hw, hw),
               repeats)
    _row(f"conv2d bwd_x {tag}", ta, tb, agree)

    ka = kernels.conv2d_bwd_k_numba(x, gy, stride, pad, k, k)
    kb = kernels.conv2d_bwd_k_numpy(x, gy, stride, pad, k, k)
    agree = _agree(ka, kb)
    ta = _time(lambda: kernels.conv2d_bwd_k_numba(x, gy, stride, pad, k, k),
               repeats)
    tb = _time(lambda: kernels.conv2d_bwd_k_numpy(x, gy, stride, pad, k, k),
               repeats)
    _row(f"conv2d bwd_k {tag}", ta, tb, agree)


def bench_bilinear(rng, repeats, tag, c, hw, n):
    fmap = rng.standard_normal((c, hw, hw)).astype(np.float32)
    i0 = rng.integers(0, hw - 1, n)
    j0 = rng.integers(0, hw - 1, n)
    fi = rng.random(n).astype(np.float32)
    fj = rng.random(n).astype(np.float32)
    a = kernels.bilinear_gather_numba(fmap, i0, j0, fi, fj)
    b = kernels.bilinear_gather_numpy(fmap, i0, j0, fi, fj)
    agree = _agree(a, b)
    ta = _time(lambda: kernels.bilinear_gather_numba(fmap, i0, j0, fi, fj),
               repeats)
    tb = _time(lambda: kernels.bilinear_gather_numpy(fmap, i0, j0, fi, fj),
               repeats)
    _row(f"bilinear gather {tag}", ta, tb, agree)

    gout = a
    sa = kernels.bilinear_scatter_numba(gout, i0, j0, fi, fj, hw, hw)
    sb = kernels.bilinear_scatter_numpy(gout, i0, j0, fi, fj, hw, hw)
    agree = _agree(sa, sb)
    ta = _time(lambda: kernels.bilinear_scatter_numba(gout, i0, j0, fi, fj,
                                                      hw, hw), repeats)
    tb = _time(lambda: kernels.bilinear_scatter_numpy(gout, i0, j0, fi, fj,
                                                      hw, hw), repeats)
    _row(f"bilinear scatter {tag}", ta, tb, agree)


def bench_nn(rng, repeats, tag, n_ref, n_query):
    ref = rng.standard_normal((n_ref, 3))
    q = ref[rng.integers(0, n_ref, n_query)] + 0.01 * rng.standard_normal(
        (n_query, 3))
    grid = kernels.build_grid(ref)
    ia, da = kernels.nn_query_numba(grid, q)
    ib, db = kernels.nn_query_numpy(grid, q)
    agree = bool(np.array_equal(ia, ib) and np.array_equal(da, db))
    ta = _time(lambda: kernels.nn_query_numba(grid, q), repeats)
    tb = _time(lambda: kernels.nn_query_numpy(grid, q), repeats)
    _row(f"nn query {tag}", ta, tb, agree)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=2)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"backend available: {kernels.NUMBA_AVAILABLE}")
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba not importable; nothing to compare")

    # shapes from desk training steps
    bench_conv(rng, args.repeats, "desk-enc 4x16->32 @16", 4, 16, 32, 16, 3, 2, 1)
    bench_conv(rng, args.repeats, "desk-smooth 1x16->16 @32 k5", 1, 16, 16, 32,
               5, 1, 2)
    # shapes from full-resolution generation
    bench_conv(rng, args.repeats, "full-enc 1x64->128 @64", 1, 64, 128, 64, 3,
               2, 1)
    bench_conv(rng, args.repeats, "full-smooth 1x64->64 @128 k5", 1, 64, 64,
               128, 5, 1, 2)

    bench_bilinear(rng, args.repeats, "desk 32ch 38k", 32, 32, 38400)
    bench_bilinear(rng, args.repeats, "full 128ch 47k", 128, 128, 47336)

    bench_nn(rng, args.repeats, "desk 20k/10k", 20000, 9600)
    bench_nn(rng, args.repeats, "full 40k/47k", 40000, 47336)


if __name__ == "__main__":
    main()
