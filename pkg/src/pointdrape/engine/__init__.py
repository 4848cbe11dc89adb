"""Minimal dense-tensor engine: numpy storage, dynamic-tape reverse-mode
differentiation, numba-accelerated hot kernels, Adam, and the TARC archive."""

from . import gradcheck, kernels, layers, ops, optim  # noqa: F401
from .archive import ArchiveError, read_archive, write_archive  # noqa: F401
from .optim import Adam, AdamState, adam_step  # noqa: F401
from .tensor import DimensionError, Tape, Tensor, active_tape, backprop, record  # noqa: F401
