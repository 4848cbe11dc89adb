"""Differentiable ops over ``Tensor``: forward in numpy/numba, backward closures
recorded on the active tape.

Conventions:
- every op's tensor inputs must share one float dtype (float32 or float64);
  plain arrays/scalars are coerced to that dtype as constants,
- image tensors are channels-first (B, C, H, W),
- ops never mutate input storage; outputs are fresh tensors,
- conv2d kernels are (C_out, C_in, k, k) with odd k; conv2d_transpose kernels
  are (C_in, C_out, k, k) and accept any k >= 1 (its output-shape rule
  (H-1)*stride - 2*pad + k cannot double sizes with odd k).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import DimensionError, Tensor, active_tape

__all__ = [
    "as_tensor", "add", "sub", "mul", "scale", "matmul", "affine", "reshape",
    "concat", "conv2d", "conv2d_transpose", "batchnorm_train", "batchnorm_eval",
    "relu", "leaky_relu", "softplus", "reduce_sum", "reduce_mean", "abs_",
    "gather_rows", "slice_rows", "select0", "bilinear_sample", "rigid_rotate",
    "normalize_rows",
]


def _dtype_of(values):
    dt = None
    for v in values:
        if isinstance(v, Tensor):
            if dt is None:
                dt = v.dtype
            elif v.dtype != dt:
                raise DimensionError(
                    f"mixed tensor dtypes {dt} vs {v.dtype} in one op"
                )
    return dt if dt is not None else np.dtype(np.float32)


def as_tensor(v, dtype=None):
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=dtype if dtype is not None else np.float32))


def _emit(data, inputs, backward):
    out = Tensor(data)
    rg = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out.requires_grad = rg
    tape = active_tape()
    if tape is not None and rg:
        tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b):
    dt = _dtype_of((a, b))
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    data = a.data + b.data

    def backward(go):
        return _unbroadcast(go, a.shape), _unbroadcast(go, b.shape)

    return _emit(data, (a, b), backward)


def sub(a, b):
    dt = _dtype_of((a, b))
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    data = a.data - b.data

    def backward(go):
        return _unbroadcast(go, a.shape), _unbroadcast(-go, b.shape)

    return _emit(data, (a, b), backward)


def mul(a, b):
    dt = _dtype_of((a, b))
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    data = a.data * b.data

    def backward(go):
        return _unbroadcast(go * b.data, a.shape), _unbroadcast(go * a.data, b.shape)

    return _emit(data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    data = a.data * a.dtype.type(c)

    def backward(go):
        return (go * a.dtype.type(c),)

    return _emit(data, (a,), backward)


def matmul(a, b):
    dt = _dtype_of((a, b))
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(go):
        return go @ b.data.T, a.data.T @ go

    return _emit(data, (a, b), backward)


def affine(x, w, b):
    """x: (N,D), w: (D,M), b: (M,) -> (N,M)."""
    dt = _dtype_of((x, w, b))
    x, w, b = as_tensor(x, dt), as_tensor(w, dt), as_tensor(b, dt)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError("affine expects x:(N,D) w:(D,M) b:(M,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"affine shapes {x.shape} {w.shape} {b.shape}")
    data = x.data @ w.data + b.data

    def backward(go):
        return go @ w.data.T, x.data.T @ go, go.sum(axis=0)

    return _emit(data, (x, w, b), backward)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)
    old = x.shape

    def backward(go):
        return (go.reshape(old),)

    return _emit(data, (x,), backward)


def concat(tensors, axis):
    dt = _dtype_of(tensors)
    ts = [as_tensor(t, dt) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(go):
        return tuple(np.split(go, offsets, axis=axis))

    return _emit(data, tuple(ts), backward)


# ---------------------------------------------------------------------------
# convolutions


def _check_conv_inputs(x, k, stride, pad):
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError("conv expects x:(B,C,H,W) k:4D")
    if k.shape[2] != k.shape[3]:
        raise DimensionError("conv kernels must be square")
    if stride < 1 or pad < 0:
        raise DimensionError("conv needs stride >= 1 and pad >= 0")


def conv2d(x, k, stride=1, pad=0):
    dt = _dtype_of((x, k))
    x, k = as_tensor(x, dt), as_tensor(k, dt)
    _check_conv_inputs(x, k, stride, pad)
    ksz = k.shape[2]
    if ksz % 2 != 1:
        raise DimensionError(f"conv2d kernel size must be odd, got {ksz}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d channels: x has {x.shape[1]}, k expects {k.shape[1]}")
    h, w = x.shape[2], x.shape[3]
    if ksz > h + 2 * pad or ksz > w + 2 * pad:
        raise DimensionError("conv2d kernel larger than padded input")
    data = kernels.conv2d_forward(
        np.ascontiguousarray(x.data), np.ascontiguousarray(k.data), stride, pad
    )

    def backward(go):
        go = np.ascontiguousarray(go)
        gx = kernels.conv2d_bwd_x(go, k.data, stride, pad, h, w)
        gk = kernels.conv2d_bwd_k(np.ascontiguousarray(x.data), go, stride, pad, ksz, ksz)
        return gx, gk

    return _emit(data, (x, k), backward)


def conv2d_transpose(x, k, stride=1, pad=0):
    """x: (B,C_in,H,W), k: (C_in,C_out,ks,ks) -> (B,C_out,Ho,Wo),
    Ho = (H-1)*stride - 2*pad + ks. Adjoint of conv2d with the same geometry.
    """
    dt = _dtype_of((x, k))
    x, k = as_tensor(x, dt), as_tensor(k, dt)
    _check_conv_inputs(x, k, stride, pad)
    ksz = k.shape[2]
    if x.shape[1] != k.shape[0]:
        raise DimensionError(
            f"conv2d_transpose channels: x has {x.shape[1]}, k expects {k.shape[0]}"
        )
    h, w = x.shape[2], x.shape[3]
    ho = (h - 1) * stride - 2 * pad + ksz
    wo = (w - 1) * stride - 2 * pad + ksz
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d_transpose output would be empty")
    data = kernels.conv2d_bwd_x(
        np.ascontiguousarray(x.data), np.ascontiguousarray(k.data), stride, pad, ho, wo
    )

    def backward(go):
        go = np.ascontiguousarray(go)
        gx = kernels.conv2d_forward(go, k.data, stride, pad)
        gk = kernels.conv2d_bwd_k(go, np.ascontiguousarray(x.data), stride, pad, ksz, ksz)
        return gx, gk

    return _emit(data, (x, k), backward)


# ---------------------------------------------------------------------------
# batch normalization (functional; running-stat bookkeeping lives in layers)


def _bn_check(x, gamma, beta, axes):
    if x.data.ndim < 2:
        raise DimensionError("batchnorm expects at least 2D input")
    ch_axes = [i for i in range(x.data.ndim) if i not in axes]
    if len(ch_axes) != 1:
        raise DimensionError(f"batchnorm axes {axes} must leave one channel axis")
    ch = ch_axes[0]
    c = x.shape[ch]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batchnorm gamma/beta must be (C,)")
    bshape = [1] * x.data.ndim
    bshape[ch] = c
    return ch, tuple(bshape)


def batchnorm_train(x, gamma, beta, axes=(0,), eps=1e-5):
    """Normalize over ``axes`` with batch statistics (biased variance).

    Returns (y, batch_mean, batch_var) where the statistics are plain (C,)
    arrays for running-average updates outside the tape.
    """
    dt = _dtype_of((x, gamma, beta))
    x, gamma, beta = as_tensor(x, dt), as_tensor(gamma, dt), as_tensor(beta, dt)
    axes = tuple(axes)
    ch, bshape = _bn_check(x, gamma, beta, axes)
    if x.data.shape[0] == 0:
        raise DimensionError("batchnorm on an empty batch")
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = x.data - mu
    xhat *= inv
    g = gamma.data.reshape(bshape)
    data = xhat * g
    data += beta.data.reshape(bshape)
    m = x.data.size // x.shape[ch]

    def backward(go):
        dbeta = go.sum(axis=axes)
        prod = go * xhat
        dgamma = prod.sum(axis=axes)
        go_mean = go.mean(axis=axes, keepdims=True)
        goxhat_mean = prod.mean(axis=axes, keepdims=True)
        dx = go - go_mean
        dx -= xhat * goxhat_mean
        dx *= g * inv
        return dx, dgamma, dbeta

    out = _emit(data, (x, gamma, beta), backward)
    return out, mu.reshape(-1).copy(), var.reshape(-1).copy()


def batchnorm_eval(x, gamma, beta, running_mean, running_var, axes=(0,), eps=1e-5):
    """Normalize with fixed running statistics (constants)."""
    dt = _dtype_of((x, gamma, beta))
    x, gamma, beta = as_tensor(x, dt), as_tensor(gamma, dt), as_tensor(beta, dt)
    axes = tuple(axes)
    ch, bshape = _bn_check(x, gamma, beta, axes)
    rm = np.asarray(running_mean, dtype=dt).reshape(bshape)
    rv = np.asarray(running_var, dtype=dt).reshape(bshape)
    inv = 1.0 / np.sqrt(rv + x.dtype.type(eps))
    xhat = (x.data - rm) * inv
    g = gamma.data.reshape(bshape)
    data = xhat * g + beta.data.reshape(bshape)

    def backward(go):
        dbeta = go.sum(axis=axes)
        dgamma = (go * xhat).sum(axis=axes)
        dx = go * (g * inv)
        return dx, dgamma, dbeta

    return _emit(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# activations


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, x.dtype.type(0))

    def backward(go):
        return (go * mask,)

    return _emit(data, (x,), backward)


def leaky_relu(x, alpha=0.2):
    x = as_tensor(x)
    a = x.dtype.type(alpha)
    mask = x.data >= 0
    data = np.where(mask, x.data, x.data * a)

    def backward(go):
        return (np.where(mask, go, go * a),)

    return _emit(data, (x,), backward)


def softplus(x, beta=1.0):
    """softplus(x) = log(1 + exp(beta*x)) / beta, with softplus(x) = x once
    beta*x > 30 (overflow branch)."""
    x = as_tensor(x)
    b = x.dtype.type(beta)
    t = x.data * b
    data = np.clip(t, x.dtype.type(-60), x.dtype.type(30))
    np.exp(data, out=data)
    np.log1p(data, out=data)
    data /= b
    big = t > 30
    data[big] = x.data[big]

    def backward(go):
        sig = np.clip(t, x.dtype.type(-60), x.dtype.type(60))
        np.negative(sig, out=sig)
        np.exp(sig, out=sig)
        sig += x.dtype.type(1)
        np.divide(x.dtype.type(1), sig, out=sig)
        sig *= go
        return (sig,)

    return _emit(data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and selections


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(go):
        g = go
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=False),)

    return _emit(data, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape
    count = x.data.size if axis is None else x.shape[axis]

    def backward(go):
        g = go
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, shape).astype(x.dtype, copy=False)
        return (g / x.dtype.type(count),)

    return _emit(data, (x,), backward)


def abs_(x):
    x = as_tensor(x)
    data = np.abs(x.data)
    sign = np.sign(x.data)

    def backward(go):
        return (go * sign,)

    return _emit(data, (x,), backward)


def gather_rows(x, idx):
    """out[i] = x[idx[i]] along axis 0; idx is a constant int array."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows expects a 1D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError("gather_rows index out of range")
    data = x.data[idx]

    def backward(go):
        g = np.zeros_like(x.data)
        np.add.at(g, idx, go)
        return (g,)

    return _emit(data, (x,), backward)


def slice_rows(x, start, stop):
    x = as_tensor(x)
    if not (0 <= start <= stop <= x.shape[0]):
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for {x.shape}")
    data = x.data[start:stop].copy()

    def backward(go):
        g = np.zeros_like(x.data)
        g[start:stop] = go
        return (g,)

    return _emit(data, (x,), backward)


def select0(x, i):
    """out = x[i] (drops axis 0)."""
    x = as_tensor(x)
    if not (0 <= i < x.shape[0]):
        raise DimensionError(f"select0 index {i} out of range for {x.shape}")
    data = x.data[i].copy()

    def backward(go):
        g = np.zeros_like(x.data)
        g[i] = go
        return (g,)

    return _emit(data, (x,), backward)


# ---------------------------------------------------------------------------
# geometry ops


def bilinear_sample(fmap, i0, j0, fi, fj):
    """Sample a channels-first map at N locations given precomputed texel
    indices/fractions (constants). fmap: (C,H,W) -> (N,C)."""
    fmap = as_tensor(fmap)
    if fmap.data.ndim != 3:
        raise DimensionError("bilinear_sample expects fmap (C,H,W)")
    c, h, w = fmap.shape
    i0 = np.ascontiguousarray(i0, dtype=np.int64)
    j0 = np.ascontiguousarray(j0, dtype=np.int64)
    fi = np.ascontiguousarray(fi, dtype=fmap.dtype)
    fj = np.ascontiguousarray(fj, dtype=fmap.dtype)
    if i0.size and (
        i0.min() < 0 or i0.max() + 1 >= h or j0.min() < 0 or j0.max() + 1 >= w
    ):
        raise DimensionError("bilinear_sample support outside the map")
    data = kernels.bilinear_gather(np.ascontiguousarray(fmap.data), i0, j0, fi, fj)

    def backward(go):
        g = kernels.bilinear_scatter(np.ascontiguousarray(go), i0, j0, fi, fj, h, w)
        return (g,)

    return _emit(data, (fmap,), backward)


def rigid_rotate(rot, v):
    """Apply per-row rotation matrices (constant) to row vectors: out_n = R_n v_n."""
    v = as_tensor(v)
    rot = np.ascontiguousarray(rot, dtype=v.dtype)
    if v.data.ndim != 2 or rot.ndim != 3 or rot.shape[0] != v.shape[0] \
            or rot.shape[1:] != (v.shape[1],) * 2:
        raise DimensionError(f"rigid_rotate shapes rot{rot.shape} v{v.shape}")
    data = np.einsum("nij,nj->ni", rot, v.data)

    def backward(go):
        return (np.einsum("nij,ni->nj", rot, go),)

    return _emit(data, (v,), backward)


def normalize_rows(x, eps=1e-12):
    """Scale each row to unit length: y = x / sqrt(sum(x^2) + eps)."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("normalize_rows expects (N,D)")
    n2 = (x.data * x.data).sum(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(n2 + x.dtype.type(eps))
    data = x.data * inv

    def backward(go):
        dot = (go * x.data).sum(axis=1, keepdims=True)
        return (inv * (go - x.data * (inv * inv * dot)),)

    return _emit(data, (x,), backward)
