"""Dense tensors with reverse-mode differentiation on a dynamic tape.

A ``Tape`` records one closure per executed op, in execution order (which is
always a valid topological order). ``backprop`` walks the tape backwards,
propagating adjoints through a scratch map keyed by tensor identity, then adds
the results into each tensor's ``.grad`` so repeated calls accumulate.
Tapes are meant to live for exactly one optimization step.

Tensors are float32 by default (training) or float64 (gradient checking);
every op requires its tensor inputs to share one dtype. Tensor data is never
mutated by ops; only optimizer steps write into parameter storage.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Tape", "record", "active_tape", "backprop", "DimensionError"]


class DimensionError(ValueError):
    """Shape/dtype precondition violated by an engine op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class Tape:
    """Ordered record of executed ops: (output, inputs, backward_fn)."""

    def __init__(self):
        self.nodes = []

    def record(self, out, inputs, backward):
        self.nodes.append((out, inputs, backward))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_ACTIVE: list[Tape] = []


class record:
    """Context manager activating a fresh tape; cleared on exit."""

    def __init__(self):
        self.tape = Tape()

    def __enter__(self):
        _ACTIVE.append(self.tape)
        return self.tape

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        self.tape.clear()
        return False


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def backprop(out: Tensor, tape: Tape | None = None):
    """Accumulate d(out)/d(input) into ``.grad`` of every requires-grad tensor.

    ``out`` must be a scalar produced on the given (or active) tape. Each call
    performs one full independent pass, so calling twice doubles leaf grads.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backprop needs an active tape")
    if out.data.size != 1:
        raise DimensionError("backprop expects a scalar loss")
    adj: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    leaves: dict[int, Tensor] = {id(out): out}
    for node_out, inputs, backward in reversed(tape.nodes):
        go = adj.pop(id(node_out), None)  # complete once all consumers ran
        if go is None:
            continue  # not on a path to `out`
        leaves.pop(id(node_out), None)
        gins = backward(go)
        for t, g in zip(inputs, gins):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + g
            else:
                adj[key] = g
                leaves[key] = t
    for key, t in leaves.items():
        if not t.requires_grad:
            continue
        g = adj[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
