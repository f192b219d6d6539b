"""Dense tensors with taped reverse-mode differentiation.

A Tensor wraps a contiguous float array plus an optional gradient
accumulator. Operations (ops.py) execute eagerly and, when a Tape is
active and any input tracks gradients, append a node holding the
backward rule. ``backward`` replays the tape in reverse and adds
gradients onto every requires_grad leaf exactly once per call; calling
it again without zeroing doubles the accumulated values.

Tapes are single-owner: enter one per training step per task. Multiple
independent tapes may run concurrently in separate tasks.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # preserves 0-d, unlike a blanket copy
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


class Node:
    """One executed operation: output, inputs, and the rule mapping the
    output gradient to per-input gradients (None where not needed)."""

    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _STACK.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STACK.tapes.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def record(self, output, inputs, backward):
        self.nodes.append(Node(output, tuple(inputs), backward))


class _TapeStack(threading.local):
    def __init__(self):
        self.tapes = []


_STACK = _TapeStack()


def active_tape():
    return _STACK.tapes[-1] if _STACK.tapes else None


def record_op(out, inputs, backward):
    """Propagate requires_grad and register the node on the active tape."""
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise ValueError("loss tensor was not produced on this tape")

    # Per-call gradient map so repeated backward() calls accumulate exactly
    # one extra copy into the leaves instead of compounding.
    grads = {id(loss): (loss, np.ones_like(loss.data))}
    for node in reversed(tape.nodes):
        entry = grads.pop(id(node.output), None)
        if entry is None:
            continue
        g_out = entry[1].astype(node.output.dtype, copy=False)
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(
                    f"backward rule produced shape {g.shape} for input of shape {inp.shape}"
                )
            prev = grads.get(id(inp))
            grads[id(inp)] = (inp, g if prev is None else prev[1] + g)

    # Whatever survived the sweep was never an op output: the leaves.
    for tensor, g in grads.values():
        tensor.accumulate_grad(g.astype(tensor.dtype, copy=False))
