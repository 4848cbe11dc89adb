"""Finite-difference gradient verification for every differentiable op.

Each registry entry builds a random small instance in float64 and returns the
input tensors plus a closure computing a scalar: the op output contracted
against a fixed random projection. ``check_case`` compares tape gradients with
central differences (h = 1e-5); relative error uses a 1e-6 denominator floor
so near-zero gradients do not blow up the ratio.

``run_all`` is both the library entry point and what the CLI ``gradcheck``
subcommand and the acceptance suite call.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, backprop, record

__all__ = ["numeric_grad", "check_case", "run_all", "CASES"]

H_STEP = 1e-5


def numeric_grad(f, tensors, h=H_STEP):
    """Central-difference gradient of scalar f() wrt each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_case(make_scalar, tensors, h=H_STEP):
    """Returns the max relative error between tape and numeric gradients."""
    with record() as tape:
        out = make_scalar()
        backprop(out, tape)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                    for t in tensors]
    for t in tensors:
        t.grad = None
    numeric = numeric_grad(lambda: make_scalar().item(), tensors, h)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-6)
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _proj(rng, shape):
    return np.asarray(rng.standard_normal(shape), dtype=np.float64)


def _scalarize(out, p):
    return ops.reduce_sum(ops.mul(out, p))


def _away_from(arr, value, margin):
    """Shift entries within ``margin`` of ``value`` outward (kink avoidance)."""
    d = arr - value
    small = np.abs(d) < margin
    arr[small] += np.where(d[small] >= 0, margin, -margin) * 2.0
    return arr


# --- case builders: each returns (tensors, scalar_fn) ----------------------


def _case_add(rng):
    a, b = _t(rng, 3, 4), _t(rng, 1, 4)
    p = _proj(rng, (3, 4))
    return [a, b], lambda: _scalarize(ops.add(a, b), p)


def _case_sub(rng):
    a, b = _t(rng, 2, 5), _t(rng, 2, 5)
    p = _proj(rng, (2, 5))
    return [a, b], lambda: _scalarize(ops.sub(a, b), p)


def _case_mul(rng):
    a, b = _t(rng, 4, 3), _t(rng, 4, 1)
    p = _proj(rng, (4, 3))
    return [a, b], lambda: _scalarize(ops.mul(a, b), p)


def _case_scale(rng):
    a = _t(rng, 3, 3)
    c = float(rng.uniform(-2, 2))
    p = _proj(rng, (3, 3))
    return [a], lambda: _scalarize(ops.scale(a, c), p)


def _case_matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    p = _proj(rng, (3, 2))
    return [a, b], lambda: _scalarize(ops.matmul(a, b), p)


def _case_affine(rng):
    x, w, b = _t(rng, 5, 3), _t(rng, 3, 4), _t(rng, 4)
    p = _proj(rng, (5, 4))
    return [x, w, b], lambda: _scalarize(ops.affine(x, w, b), p)


def _case_reshape(rng):
    x = _t(rng, 2, 6)
    p = _proj(rng, (3, 4))
    return [x], lambda: _scalarize(ops.reshape(x, (3, 4)), p)


def _case_concat(rng):
    a, b, c = _t(rng, 2, 3), _t(rng, 2, 2), _t(rng, 2, 4)
    p = _proj(rng, (2, 9))
    return [a, b, c], lambda: _scalarize(ops.concat([a, b, c], axis=1), p)


def _case_conv2d(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.choice([0, 1]))
    x = _t(rng, 2, 3, 6, 6)
    w = _t(rng, 2, 3, k, k)
    ho = (6 + 2 * pad - k) // stride + 1
    p = _proj(rng, (2, 2, ho, ho))
    return [x, w], lambda: _scalarize(ops.conv2d(x, w, stride, pad), p)


def _case_conv2d_transpose(rng):
    k = int(rng.choice([2, 3, 4]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.choice([0, 1]))
    if (4 - 1) * stride - 2 * pad + k < 1:
        pad = 0
    x = _t(rng, 2, 3, 4, 4)
    w = _t(rng, 3, 2, k, k)
    ho = (4 - 1) * stride - 2 * pad + k
    p = _proj(rng, (2, 2, ho, ho))
    return [x, w], lambda: _scalarize(ops.conv2d_transpose(x, w, stride, pad), p)


def _case_batchnorm_train(rng):
    x, g, b = _t(rng, 6, 3), _t(rng, 3), _t(rng, 3)
    p = _proj(rng, (6, 3))
    return [x, g, b], lambda: _scalarize(
        ops.batchnorm_train(x, g, b, (0,), 1e-5)[0], p)


def _case_batchnorm_train_4d(rng):
    x, g, b = _t(rng, 2, 3, 4, 4), _t(rng, 3), _t(rng, 3)
    p = _proj(rng, (2, 3, 4, 4))
    return [x, g, b], lambda: _scalarize(
        ops.batchnorm_train(x, g, b, (0, 2, 3), 1e-5)[0], p)


def _case_batchnorm_eval(rng):
    x, g, b = _t(rng, 5, 4), _t(rng, 4), _t(rng, 4)
    rm = _proj(rng, (4,))
    rv = np.abs(_proj(rng, (4,))) + 0.5
    p = _proj(rng, (5, 4))
    return [x, g, b], lambda: _scalarize(
        ops.batchnorm_eval(x, g, b, rm, rv, (0,), 1e-5), p)


def _case_relu(rng):
    x = _t(rng, 4, 4)
    _away_from(x.data, 0.0, 0.05)
    p = _proj(rng, (4, 4))
    return [x], lambda: _scalarize(ops.relu(x), p)


def _case_leaky_relu(rng):
    x = _t(rng, 4, 4)
    _away_from(x.data, 0.0, 0.05)
    p = _proj(rng, (4, 4))
    return [x], lambda: _scalarize(ops.leaky_relu(x, 0.2), p)


def _case_softplus(rng):
    x = _t(rng, 4, 4)
    p = _proj(rng, (4, 4))
    beta = float(rng.choice([1.0, 5.0, 20.0]))
    return [x], lambda: _scalarize(ops.softplus(x, beta), p)


def _case_reduce_sum(rng):
    x = _t(rng, 3, 5)
    return [x], lambda: ops.reduce_sum(x)


def _case_reduce_sum_axis(rng):
    x = _t(rng, 3, 5)
    p = _proj(rng, (3,))
    return [x], lambda: _scalarize(ops.reduce_sum(x, axis=1), p)


def _case_reduce_mean(rng):
    x = _t(rng, 4, 3)
    return [x], lambda: ops.reduce_mean(x)


def _case_abs(rng):
    x = _t(rng, 4, 4)
    _away_from(x.data, 0.0, 0.05)
    p = _proj(rng, (4, 4))
    return [x], lambda: _scalarize(ops.abs_(x), p)


def _case_gather_rows(rng):
    x = _t(rng, 6, 3)
    idx = rng.integers(0, 6, size=9)
    p = _proj(rng, (9, 3))
    return [x], lambda: _scalarize(ops.gather_rows(x, idx), p)


def _case_slice_rows(rng):
    x = _t(rng, 7, 3)
    p = _proj(rng, (3, 3))
    return [x], lambda: _scalarize(ops.slice_rows(x, 2, 5), p)


def _case_select0(rng):
    x = _t(rng, 4, 3, 3)
    i = int(rng.integers(0, 4))
    p = _proj(rng, (3, 3))
    return [x], lambda: _scalarize(ops.select0(x, i), p)


def _case_bilinear_sample(rng):
    fmap = _t(rng, 3, 5, 5)
    n = 7
    i0 = rng.integers(0, 4, size=n)
    j0 = rng.integers(0, 4, size=n)
    fi = rng.uniform(0.05, 0.95, size=n)
    fj = rng.uniform(0.05, 0.95, size=n)
    p = _proj(rng, (n, 3))
    return [fmap], lambda: _scalarize(ops.bilinear_sample(fmap, i0, j0, fi, fj), p)


def _case_rigid_rotate(rng):
    n = 6
    v = _t(rng, n, 3)
    rot = _proj(rng, (n, 3, 3))
    p = _proj(rng, (n, 3))
    return [v], lambda: _scalarize(ops.rigid_rotate(rot, v), p)


def _case_normalize_rows(rng):
    x = _t(rng, 5, 3)
    # keep rows safely away from the origin
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    x.data += x.data / norms * 0.5
    p = _proj(rng, (5, 3))
    return [x], lambda: _scalarize(ops.normalize_rows(x), p)


CASES = [
    ("add", _case_add),
    ("sub", _case_sub),
    ("mul", _case_mul),
    ("scale", _case_scale),
    ("matmul", _case_matmul),
    ("affine", _case_affine),
    ("reshape", _case_reshape),
    ("concat", _case_concat),
    ("conv2d", _case_conv2d),
    ("conv2d_transpose", _case_conv2d_transpose),
    ("batchnorm_train", _case_batchnorm_train),
    ("batchnorm_train_4d", _case_batchnorm_train_4d),
    ("batchnorm_eval", _case_batchnorm_eval),
    ("relu", _case_relu),
    ("leaky_relu", _case_leaky_relu),
    ("softplus", _case_softplus),
    ("reduce_sum", _case_reduce_sum),
    ("reduce_sum_axis", _case_reduce_sum_axis),
    ("reduce_mean", _case_reduce_mean),
    ("abs", _case_abs),
    ("gather_rows", _case_gather_rows),
    ("slice_rows", _case_slice_rows),
    ("select0", _case_select0),
    ("bilinear_sample", _case_bilinear_sample),
    ("rigid_rotate", _case_rigid_rotate),
    ("normalize_rows", _case_normalize_rows),
]


def run_all(seed=0, instances=10, h=H_STEP):
    """Returns {op name: max relative error over instances}."""
    results = {}
    for case_i, (name, builder) in enumerate(CASES):
        rng = np.random.default_rng(seed * 1000 + case_i)
        worst = 0.0
        for _ in range(instances):
            tensors, scalar_fn = builder(rng)
            worst = max(worst, check_case(scalar_fn, tensors, h))
        results[name] = worst
    return results
