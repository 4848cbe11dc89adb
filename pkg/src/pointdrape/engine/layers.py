"""Parameterized layers over the functional ops.

Layers own their parameter tensors (named for checkpointing) and, for
batchnorm, the running statistics. ``named_params`` yields trainable tensors;
``state_entries`` yields everything a checkpoint must hold (parameters plus
running statistics), as float32 arrays keyed by slash-paths.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor

__all__ = ["Affine", "Conv2d", "ConvTranspose2d", "BatchNorm"]


def _he_fan_in(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Affine:
    def __init__(self, d_in, d_out, rng, name, dtype=np.float32):
        self.name = name
        self.w = Tensor(_he_fan_in(rng, (d_in, d_out), d_in, dtype),
                        requires_grad=True, name=f"{name}/W")
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True,
                        name=f"{name}/b")

    def __call__(self, x):
        return ops.affine(x, self.w, self.b)

    def named_params(self):
        yield self.w.name, self.w
        yield self.b.name, self.b

    def state_entries(self):
        yield self.w.name, self.w.data
        yield self.b.name, self.b.data


class Conv2d:
    def __init__(self, c_in, c_out, ksize, stride, pad, rng, name, dtype=np.float32):
        if ksize % 2 != 1:
            raise DimensionError("Conv2d kernel size must be odd")
        self.stride, self.pad, self.name = stride, pad, name
        fan_in = c_in * ksize * ksize
        self.w = Tensor(_he_fan_in(rng, (c_out, c_in, ksize, ksize), fan_in, dtype),
                        requires_grad=True, name=f"{name}/W")
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True,
                        name=f"{name}/b")

    def __call__(self, x):
        y = ops.conv2d(x, self.w, self.stride, self.pad)
        return ops.add(y, ops.reshape(self.b, (1, -1, 1, 1)))

    def named_params(self):
        yield self.w.name, self.w
        yield self.b.name, self.b

    def state_entries(self):
        yield self.w.name, self.w.data
        yield self.b.name, self.b.data


class ConvTranspose2d:
    def __init__(self, c_in, c_out, ksize, stride, pad, rng, name, dtype=np.float32):
        self.stride, self.pad, self.name = stride, pad, name
        fan_in = c_in * ksize * ksize
        self.w = Tensor(_he_fan_in(rng, (c_in, c_out, ksize, ksize), fan_in, dtype),
                        requires_grad=True, name=f"{name}/W")
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True,
                        name=f"{name}/b")

    def __call__(self, x):
        y = ops.conv2d_transpose(x, self.w, self.stride, self.pad)
        return ops.add(y, ops.reshape(self.b, (1, -1, 1, 1)))

    def named_params(self):
        yield self.w.name, self.w
        yield self.b.name, self.b

    def state_entries(self):
        yield self.w.name, self.w.data
        yield self.b.name, self.b.data


class BatchNorm:
    """Batchnorm over leading (and, for 4D inputs, spatial) axes.

    Train mode normalizes with batch statistics and updates running averages
    with the given momentum (biased variance; a momentum of 0.1 means the
    running value moves 10% toward the batch value per step). Eval mode uses
    the stored running statistics, so outputs are independent of batch
    composition.
    """

    def __init__(self, channels, name, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.name = name
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True,
                            name=f"{name}/gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True,
                           name=f"{name}/beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _axes(self, x):
        if x.data.ndim == 2:
            return (0,)
        if x.data.ndim == 4:
            return (0, 2, 3)
        raise DimensionError("BatchNorm supports (N,C) or (B,C,H,W) inputs")

    def __call__(self, x, train):
        axes = self._axes(x)
        if train:
            y, mu, var = ops.batchnorm_train(x, self.gamma, self.beta, axes, self.eps)
            m = np.float32(self.momentum)
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(
                self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(
                self.running_var.dtype)
            return y
        return ops.batchnorm_eval(x, self.gamma, self.beta, self.running_mean,
                                  self.running_var, axes, self.eps)

    def named_params(self):
        yield self.gamma.name, self.gamma
        yield self.beta.name, self.beta

    def state_entries(self):
        yield self.gamma.name, self.gamma.data
        yield self.beta.name, self.beta.data
        yield f"{self.name}/running_mean", self.running_mean
        yield f"{self.name}/running_var", self.running_var
