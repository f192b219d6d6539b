"""Minimal dense-tensor math with reverse-mode gradient accumulation."""

from . import ops
from .kernels import BACKEND
from .tensor import Tape, Tensor, backward, record_op

__all__ = ["BACKEND", "Tape", "Tensor", "backward", "ops", "record_op"]
