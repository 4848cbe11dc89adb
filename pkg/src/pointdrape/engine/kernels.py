"""Hot numeric kernels, each in a numba variant and a pure-numpy variant.

The dispatched defaults (unsuffixed names at the bottom) route every kernel
to whichever implementation measured faster: numba loops for the
irregular-access kernels (bilinear gather/scatter, grid nearest neighbor),
BLAS-backed numpy for the convolutions. Set ``POINTDRAPE_NUMBA=0`` to force
the numpy path everywhere (debugging, or machines where numba is
unavailable); the package then works identically, only slower on the
irregular kernels. Both paths are deterministic and meet the same contracts;
the numba path compiles lazily per dtype and caches to disk.

Exposed pairs (``*_numba`` / ``*_numpy``) stay importable regardless of the
flag so benchmarks can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("POINTDRAPE_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("0", "false", "off", "no")

try:
    if not NUMBA_REQUESTED:
        raise ImportError("numba disabled via POINTDRAPE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):  # pragma: no cover - trivial paper-over
        """No-op decorator stand-in so the module still imports."""

        def wrap(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrap


def backend_name() -> str:
    return "numba" if NUMBA_AVAILABLE else "numpy"


# ---------------------------------------------------------------------------
# conv2d forward


def conv2d_forward_numpy(x, k, stride, pad):
    """x: (B,C,H,W), k: (O,C,kh,kw) -> (B,O,Ho,Wo). Caller validates shapes."""
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # (B,C,Ho,Wo,kh,kw) x (O,C,kh,kw) -> (B,O,Ho,Wo)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    out = cols @ k.reshape(o, c * kh * kw).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))


def _conv2d_forward_loops(x, k, stride, pad, out):
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho, wo = out.shape[2], out.shape[3]
    for bi in range(b):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    y0 = yi * stride - pad
                    x0 = xi * stride - pad
                    for ci in range(c):
                        for dy in range(kh):
                            sy = y0 + dy
                            if sy < 0 or sy >= h:
                                continue
                            for dx in range(kw):
                                sx = x0 + dx
                                if sx < 0 or sx >= w:
                                    continue
                                acc += x[bi, ci, sy, sx] * k[oi, ci, dy, dx]
                    out[bi, oi, yi, xi] = acc
    return out


_conv2d_forward_jit = njit(cache=True)(_conv2d_forward_loops)


def conv2d_forward_numba(x, k, stride, pad):
    b = x.shape[0]
    o, _, kh, kw = k.shape
    ho = (x.shape[2] + 2 * pad - kh) // stride + 1
    wo = (x.shape[3] + 2 * pad - kw) // stride + 1
    out = np.empty((b, o, ho, wo), dtype=x.dtype)
    _conv2d_forward_jit(x, k, stride, pad, out)
    return out


# ---------------------------------------------------------------------------
# conv2d backward wrt input (also the conv2d_transpose forward)


def conv2d_bwd_x_numpy(gy, k, stride, pad, h, w):
    """gy: (B,O,Ho,Wo), k: (O,C,kh,kw) -> gx: (B,C,H,W)."""
    b, o, ho, wo = gy.shape
    _, c, kh, kw = k.shape
    gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gy.dtype)
    # scatter each kernel tap as a strided block add
    cont = np.einsum("bohw,ocij->bcijhw", gy, k, optimize=True)
    for dy in range(kh):
        for dx in range(kw):
            gxp[:, :, dy : dy + (ho - 1) * stride + 1 : stride,
                dx : dx + (wo - 1) * stride + 1 : stride] += cont[:, :, dy, dx]
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])
    return gxp


def _conv2d_bwd_x_loops(gy, k, stride, pad, gx):
    b, o, ho, wo = gy.shape
    _, c, kh, kw = k.shape
    h, w = gx.shape[2], gx.shape[3]
    for bi in range(b):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    g = gy[bi, oi, yi, xi]
                    y0 = yi * stride - pad
                    x0 = xi * stride - pad
                    for ci in range(c):
                        for dy in range(kh):
                            sy = y0 + dy
                            if sy < 0 or sy >= h:
                                continue
                            for dx in range(kw):
                                sx = x0 + dx
                                if sx < 0 or sx >= w:
                                    continue
                                gx[bi, ci, sy, sx] += g * k[oi, ci, dy, dx]
    return gx


_conv2d_bwd_x_jit = njit(cache=True)(_conv2d_bwd_x_loops)


def conv2d_bwd_x_numba(gy, k, stride, pad, h, w):
    b = gy.shape[0]
    c = k.shape[1]
    gx = np.zeros((b, c, h, w), dtype=gy.dtype)
    _conv2d_bwd_x_jit(gy, k, stride, pad, gx)
    return gx


# ---------------------------------------------------------------------------
# conv2d backward wrt kernel


def conv2d_bwd_k_numpy(x, gy, stride, pad, kh, kw):
    b, c, h, w = x.shape
    _, o, ho, wo = gy.shape[0], gy.shape[1], gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.einsum("bchwij,bohw->ocij", win, gy, optimize=True)


def _conv2d_bwd_k_loops(x, gy, stride, pad, gk):
    b, c, h, w = x.shape
    o, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    kh, kw = gk.shape[2], gk.shape[3]
    for bi in range(b):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    g = gy[bi, oi, yi, xi]
                    y0 = yi * stride - pad
                    x0 = xi * stride - pad
                    for ci in range(c):
                        for dy in range(kh):
                            sy = y0 + dy
                            if sy < 0 or sy >= h:
                                continue
                            for dx in range(kw):
                                sx = x0 + dx
                                if sx < 0 or sx >= w:
                                    continue
                                gk[oi, ci, dy, dx] += g * x[bi, ci, sy, sx]
    return gk


_conv2d_bwd_k_jit = njit(cache=True)(_conv2d_bwd_k_loops)


def conv2d_bwd_k_numba(x, gy, stride, pad, kh, kw):
    o = gy.shape[1]
    c = x.shape[1]
    gk = np.zeros((o, c, kh, kw), dtype=x.dtype)
    _conv2d_bwd_k_jit(x, gy, stride, pad, gk)
    return gk


# ---------------------------------------------------------------------------
# bilinear map sampling (channels-first maps)


def bilinear_gather_numpy(fmap, i0, j0, fi, fj):
    """fmap: (C,H,W); i0,j0: (N,) int64 top-left texel; fi,fj: (N,) fractions.

    Returns (N,C). Caller guarantees i0,i0+1,j0,j0+1 in bounds (fractions of 0
    or 1 let a border index alias in-bounds; weights are exact either way).
    """
    c = fmap.shape[0]
    w00 = (1.0 - fi) * (1.0 - fj)
    w01 = (1.0 - fi) * fj
    w10 = fi * (1.0 - fj)
    w11 = fi * fj
    v00 = fmap[:, i0, j0]
    v01 = fmap[:, i0, j0 + 1]
    v10 = fmap[:, i0 + 1, j0]
    v11 = fmap[:, i0 + 1, j0 + 1]
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    return np.ascontiguousarray(out.T)


def _bilinear_gather_loops(fmap, i0, j0, fi, fj, out):
    c = fmap.shape[0]
    n = i0.shape[0]
    for p in range(n):
        a, bcol = i0[p], j0[p]
        wi, wj = fi[p], fj[p]
        w00 = (1.0 - wi) * (1.0 - wj)
        w01 = (1.0 - wi) * wj
        w10 = wi * (1.0 - wj)
        w11 = wi * wj
        for ch in range(c):
            out[p, ch] = (
                fmap[ch, a, bcol] * w00
                + fmap[ch, a, bcol + 1] * w01
                + fmap[ch, a + 1, bcol] * w10
                + fmap[ch, a + 1, bcol + 1] * w11
            )
    return out


_bilinear_gather_jit = njit(cache=True)(_bilinear_gather_loops)


def bilinear_gather_numba(fmap, i0, j0, fi, fj):
    out = np.empty((i0.shape[0], fmap.shape[0]), dtype=fmap.dtype)
    _bilinear_gather_jit(fmap, i0, j0, fi, fj, out)
    return out


def bilinear_scatter_numpy(gout, i0, j0, fi, fj, h, w):
    """Adjoint of bilinear_gather: gout (N,C) -> gmap (C,H,W)."""
    c = gout.shape[1]
    gmap = np.zeros((c, h, w), dtype=gout.dtype)
    w00 = (1.0 - fi) * (1.0 - fj)
    w01 = (1.0 - fi) * fj
    w10 = fi * (1.0 - fj)
    w11 = fi * fj
    gt = gout.T  # (C,N)
    np.add.at(gmap, (slice(None), i0, j0), gt * w00)
    np.add.at(gmap, (slice(None), i0, j0 + 1), gt * w01)
    np.add.at(gmap, (slice(None), i0 + 1, j0), gt * w10)
    np.add.at(gmap, (slice(None), i0 + 1, j0 + 1), gt * w11)
    return gmap


def _bilinear_scatter_loops(gout, i0, j0, fi, fj, gmap):
    n, c = gout.shape
    for p in range(n):
        a, bcol = i0[p], j0[p]
        wi, wj = fi[p], fj[p]
        w00 = (1.0 - wi) * (1.0 - wj)
        w01 = (1.0 - wi) * wj
        w10 = wi * (1.0 - wj)
        w11 = wi * wj
        for ch in range(c):
            g = gout[p, ch]
            gmap[ch, a, bcol] += g * w00
            gmap[ch, a, bcol + 1] += g * w01
            gmap[ch, a + 1, bcol] += g * w10
            gmap[ch, a + 1, bcol + 1] += g * w11
    return gmap


_bilinear_scatter_jit = njit(cache=True)(_bilinear_scatter_loops)


def bilinear_scatter_numba(gout, i0, j0, fi, fj, h, w):
    gmap = np.zeros((gout.shape[1], h, w), dtype=gout.dtype)
    _bilinear_scatter_jit(gout, i0, j0, fi, fj, gmap)
    return gmap


# ---------------------------------------------------------------------------
# exact nearest neighbour: uniform grid with expanding shells
#
# Distances are computed as dx*dx + dy*dy + dz*dz in that order on both paths
# and in the brute-force oracle, so results agree bitwise. Ties break to the
# lowest point index. The shell stop uses a strict comparison against the
# margin to the unsearched region, which can only over-search, never miss.


def _grid_shape(n):
    side = int(np.ceil((max(n, 1) / 2.0) ** (1.0 / 3.0)))
    return min(max(side, 1), 64)


def build_grid(points):
    """points: (N,3) float -> dict of arrays describing a uniform grid."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    side = _grid_shape(n)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    cell = span / side
    ijk = np.minimum(((pts - lo) / cell).astype(np.int64), side - 1)
    ijk = np.maximum(ijk, 0)
    flat = (ijk[:, 0] * side + ijk[:, 1]) * side + ijk[:, 2]
    order = np.argsort(flat, kind="stable")
    starts = np.zeros(side * side * side + 1, dtype=np.int64)
    np.add.at(starts, flat + 1, 1)
    starts = np.cumsum(starts)
    return {
        "points": pts,
        "order": order.astype(np.int64),
        "starts": starts,
        "lo": lo,
        "cell": cell,
        "side": side,
    }


def _nn_query_loops(pts, order, starts, lo, cell, side, queries, out_idx, out_d2):
    nq = queries.shape[0]
    for qi in range(nq):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        cx = int((qx - lo[0]) / cell[0])
        cy = int((qy - lo[1]) / cell[1])
        cz = int((qz - lo[2]) / cell[2])
        if cx < 0:
            cx = 0
        elif cx >= side:
            cx = side - 1
        if cy < 0:
            cy = 0
        elif cy >= side:
            cy = side - 1
        if cz < 0:
            cz = 0
        elif cz >= side:
            cz = side - 1
        best = np.inf
        best_i = -1
        r = 0
        while True:
            x0, x1 = cx - r, cx + r
            y0, y1 = cy - r, cy + r
            z0, z1 = cz - r, cz + r
            for gx in range(max(x0, 0), min(x1, side - 1) + 1):
                on_x = gx == x0 or gx == x1
                for gy in range(max(y0, 0), min(y1, side - 1) + 1):
                    # interior (gx, gy) columns were searched through at r-1
                    # except for their two new end caps, so jump the z scan
                    # straight to those planes
                    if r > 0 and not (on_x or gy == y0 or gy == y1):
                        zlo = z0 if z0 >= 0 else z1
                        zstep = z1 - z0 if z0 >= 0 and z1 <= side - 1 else 1
                        zhi = z1 if z1 <= side - 1 else zlo
                        if zhi < 0 or zlo > side - 1:
                            continue
                    else:
                        zlo = max(z0, 0)
                        zhi = min(z1, side - 1)
                        zstep = 1
                    for gz in range(zlo, zhi + 1, zstep):
                        c = (gx * side + gy) * side + gz
                        s0 = starts[c]
                        s1 = starts[c + 1]
                        if s0 == s1:
                            continue
                        if best_i >= 0:
                            # skip the cell when even its box cannot beat the
                            # current best; strict comparison keeps ties, and
                            # the box is inflated a hair because cell
                            # assignment rounds at the boundaries
                            e = lo[0] + gx * cell[0]
                            dx = e - qx if qx < e else qx - (e + cell[0])
                            dx = dx - 1e-9 * cell[0]
                            if dx < 0.0:
                                dx = 0.0
                            e = lo[1] + gy * cell[1]
                            dy = e - qy if qy < e else qy - (e + cell[1])
                            dy = dy - 1e-9 * cell[1]
                            if dy < 0.0:
                                dy = 0.0
                            e = lo[2] + gz * cell[2]
                            dz = e - qz if qz < e else qz - (e + cell[2])
                            dz = dz - 1e-9 * cell[2]
                            if dz < 0.0:
                                dz = 0.0
                            if dx * dx + dy * dy + dz * dz > best:
                                continue
                        for s in range(s0, s1):
                            pi = order[s]
                            dx = qx - pts[pi, 0]
                            dy = qy - pts[pi, 1]
                            dz = qz - pts[pi, 2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < best or (d2 == best and pi < best_i):
                                best = d2
                                best_i = pi
            covered = (
                x0 <= 0 and y0 <= 0 and z0 <= 0
                and x1 >= side - 1 and y1 >= side - 1 and z1 >= side - 1
            )
            if covered:
                break
            if best_i >= 0:
                # distance from q to the boundary of the searched block
                mx = min(qx - (lo[0] + x0 * cell[0]), (lo[0] + (x1 + 1) * cell[0]) - qx)
                my = min(qy - (lo[1] + y0 * cell[1]), (lo[1] + (y1 + 1) * cell[1]) - qy)
                mz = min(qz - (lo[2] + z0 * cell[2]), (lo[2] + (z1 + 1) * cell[2]) - qz)
                m = min(mx, min(my, mz))
                if m > 0.0 and best < m * m:
                    break
            r += 1
        out_idx[qi] = best_i
        out_d2[qi] = best


_nn_query_jit = njit(cache=True)(_nn_query_loops)


def nn_query_numba(grid, queries):
    q = np.ascontiguousarray(queries, dtype=np.float64)
    idx = np.empty(q.shape[0], dtype=np.int64)
    d2 = np.empty(q.shape[0], dtype=np.float64)
    _nn_query_jit(
        grid["points"], grid["order"], grid["starts"], grid["lo"], grid["cell"],
        grid["side"], q, idx, d2,
    )
    return idx, d2


def nn_query_numpy(grid, queries, chunk=256):
    """Chunked brute force; same per-pair arithmetic as the oracle."""
    pts = grid["points"]
    q = np.ascontiguousarray(queries, dtype=np.float64)
    idx = np.empty(q.shape[0], dtype=np.int64)
    d2 = np.empty(q.shape[0], dtype=np.float64)
    for s in range(0, q.shape[0], chunk):
        block = q[s : s + chunk]
        diff = block[:, None, :] - pts[None, :, :]
        dist = (diff * diff).sum(axis=2)
        loc = dist.argmin(axis=1)
        idx[s : s + chunk] = loc
        d2[s : s + chunk] = dist[np.arange(block.shape[0]), loc]
    return idx, d2


# ---------------------------------------------------------------------------
# dispatched defaults

# The conv family always dispatches to the numpy implementations: they run on
# BLAS matmuls and beat the loop kernels by 8-50x at every shape the model
# uses (see benchmarks/bench_kernels.py). The irregular-access kernels go to
# numba when available: 3-6x for bilinear gather/scatter, three orders of
# magnitude for grid nearest-neighbor queries versus chunked brute force.
conv2d_forward = conv2d_forward_numpy
conv2d_bwd_x = conv2d_bwd_x_numpy
conv2d_bwd_k = conv2d_bwd_k_numpy
if NUMBA_AVAILABLE:
    bilinear_gather = bilinear_gather_numba
    bilinear_scatter = bilinear_scatter_numba
    nn_query = nn_query_numba
else:
    bilinear_gather = bilinear_gather_numpy
    bilinear_scatter = bilinear_scatter_numpy
    nn_query = nn_query_numpy
