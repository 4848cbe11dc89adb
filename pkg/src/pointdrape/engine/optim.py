"""Adam optimizer over engine tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "Adam"]


class AdamState:
    """First/second moment estimates plus the step counter, one slot per
    parameter (keyed by position in the parameter list)."""

    def __init__(self, params: list[Tensor]):
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: list[Tensor], state: AdamState, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update. Parameters with ``grad is None`` are skipped
    (their moments still age via the shared step counter denominator).
    Non-finite gradients raise rather than silently corrupting parameters.
    """
    state.t += 1
    t = state.t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            name = p.name or f"param[{i}]"
            raise ValueError(f"non-finite gradient for {name} at step {t}")
        dt = p.data.dtype.type
        b1, b2 = dt(beta1), dt(beta2)
        state.m[i] = b1 * state.m[i] + (dt(1) - b1) * g
        state.v[i] = b2 * state.v[i] + (dt(1) - b2) * (g * g)
        mhat = state.m[i] / (dt(1) - dt(beta1) ** t)
        vhat = state.v[i] / (dt(1) - dt(beta2) ** t)
        p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))


class Adam:
    """Convenience wrapper binding a parameter list to its state."""

    def __init__(self, params: list[Tensor], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState(self.params)

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
