"""Differentiable operations over Tensor.

Each function runs its forward pass eagerly and registers a backward rule
on the active tape (see tensor.record_op). The operation set is exactly
what the fixed encoder/projector/classifier stack and its losses need; the
convolutions dispatch to the kernels backend (compiled or numpy).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from . import kernels as K
from .tensor import Tensor, record_op


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op(out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op(out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record_op(out, (a, b), bwd)


def neg(a):
    out = Tensor(-a.data)
    return record_op(out, (a,), lambda g: (-g,))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return record_op(out, (x,), bwd)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)

    return record_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    return record_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return record_op(out, (x,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis):
    tensors = tuple(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record_op(out, tensors, bwd)


def stack(tensors, axis=0):
    tensors = tuple(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        # np.asarray keeps 0-d gradients 0-d when stacking scalars
        return tuple(np.asarray(moved[i]) for i in range(len(tensors)))

    return record_op(out, tensors, bwd)


def select_row(x, index):
    """Row `index` along the leading axis, as its own tensor."""
    out = Tensor(x.data[index])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# network layers


def conv1d_same(x, filters, bias=None):
    """Depthwise length-preserving cross-correlation.

    x is (C, N) or (batch, C, N); filters is (K, P). Every filter slides
    over every input row, so the output is (..., K*C, N). Zero padding is
    floor((P-1)/2) left / ceil((P-1)/2) right: even lengths pad one extra
    sample on the right.
    """
    if filters.ndim != 2:
        raise ShapeError(f"filters must be (K, P), got {filters.shape}")
    if x.ndim not in (2, 3):
        raise ShapeError(f"input must be (C, N) or (batch, C, N), got {x.shape}")
    nk, taps = filters.shape
    if taps < 1:
        raise ShapeError("filter length must be >= 1")
    n_time = x.shape[-1]
    if taps > n_time:
        warnings.warn(
            f"filter length {taps} exceeds signal length {n_time}; output is pure padding overlap",
            stacklevel=2,
        )
    batched = x.ndim == 3
    x3 = x.data if batched else x.data[None]
    nb, nc, _ = x3.shape

    y = K.depthwise_corr(x3, filters.data)  # (B, K, C, N)
    if bias is not None:
        if bias.shape != (nk,):
            raise ShapeError(f"bias must be ({nk},), got {bias.shape}")
        y = y + bias.data[None, :, None, None]
    out_shape = (nb, nk * nc, n_time) if batched else (nk * nc, n_time)
    out = Tensor(y.reshape(out_shape))

    def bwd(g):
        g4 = np.ascontiguousarray(g.reshape(nb, nk, nc, n_time))
        gx = K.depthwise_corr_grad_input(g4, filters.data) if x.requires_grad else None
        if gx is not None and not batched:
            gx = gx[0]
        gk = K.depthwise_corr_grad_kernels(g4, x3, taps) if filters.requires_grad else None
        if bias is None:
            return gx, gk
        gb = g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    inputs = (x, filters) if bias is None else (x, filters, bias)
    return record_op(out, inputs, bwd)


def conv1d_channels(x, weights, bias=None):
    """Standard multichannel 1-D convolution with length-preserving padding.

    x is (C_in, N) or (batch, C_in, N); weights is (C_out, C_in, P);
    output (..., C_out, N). Same padding split as conv1d_same.
    """
    if weights.ndim != 3:
        raise ShapeError(f"weights must be (C_out, C_in, P), got {weights.shape}")
    if x.ndim not in (2, 3):
        raise ShapeError(f"input must be (C_in, N) or (batch, C_in, N), got {x.shape}")
    n_out, n_in, taps = weights.shape
    if x.shape[-2] != n_in:
        raise ShapeError(f"input has {x.shape[-2]} channels, weights expect {n_in}")
    n_time = x.shape[-1]
    if taps > n_time:
        warnings.warn(
            f"filter length {taps} exceeds signal length {n_time}; output is pure padding overlap",
            stacklevel=2,
        )
    batched = x.ndim == 3
    x3 = x.data if batched else x.data[None]

    y = K.channel_mix_corr(x3, weights.data)  # (B, C_out, N)
    if bias is not None:
        if bias.shape != (n_out,):
            raise ShapeError(f"bias must be ({n_out},), got {bias.shape}")
        y = y + bias.data[None, :, None]
    out = Tensor(y if batched else y[0])

    def bwd(g):
        g3 = np.ascontiguousarray(g if batched else g[None])
        gx = K.channel_mix_corr_grad_input(g3, weights.data) if x.requires_grad else None
        if gx is not None and not batched:
            gx = gx[0]
        gw = K.channel_mix_corr_grad_weights(g3, x3, taps) if weights.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g3.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return record_op(out, inputs, bwd)


def channel_collapse(x, weights):
    """Weighted sum over channels: (C, N) with weights (C,) -> (1, N)."""
    if x.ndim != 2:
        raise ShapeError(f"input must be (C, N), got {x.shape}")
    if weights.shape != (x.shape[0],):
        raise ShapeError(f"weights must be ({x.shape[0]},), got {weights.shape}")
    out = Tensor((weights.data @ x.data)[None])

    def bwd(g):
        gx = np.outer(weights.data, g[0]) if x.requires_grad else None
        gw = x.data @ g[0] if weights.requires_grad else None
        return gx, gw

    return record_op(out, (x, weights), bwd)


def spatial_collapse(x, weights):
    """Per-map channel collapse: x (..., K, C, N) with weights (K, C) -> (..., K, N)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be (K, C, N) or (batch, K, C, N), got {x.shape}")
    if weights.shape != x.shape[-3:-1]:
        raise ShapeError(f"weights must be {x.shape[-3:-1]}, got {weights.shape}")
    out = Tensor(np.einsum("...kcn,kc->...kn", x.data, weights.data))

    spec = "bkcn,bkn->kc" if x.ndim == 4 else "kcn,kn->kc"

    def bwd(g):
        gx = np.einsum("...kn,kc->...kcn", g, weights.data) if x.requires_grad else None
        gw = np.einsum(spec, x.data, g) if weights.requires_grad else None
        return gx, gw

    return record_op(out, (x, weights), bwd)


def avg_pool_time(x, window):
    """Non-overlapping mean pooling along time; trailing remainder is dropped."""
    if window < 1:
        raise ShapeError(f"pool window must be >= 1, got {window}")
    n_time = x.shape[-1]
    if window > n_time:
        raise ShapeError(f"pool window {window} leaves an empty time axis (N={n_time})")
    n_out = n_time // window
    kept = x.data[..., : n_out * window]
    out = Tensor(kept.reshape(x.shape[:-1] + (n_out, window)).mean(axis=-1))

    def bwd(g):
        gx = np.zeros_like(x.data)
        expanded = np.repeat(g / window, window, axis=-1)
        gx[..., : n_out * window] = expanded
        return (gx,)

    return record_op(out, (x,), bwd)


def elu(x):
    """x for x > 0, exp(x) - 1 otherwise (unit alpha)."""
    pos = x.data > 0
    y = np.where(pos, x.data, np.expm1(x.data))
    out = Tensor(y)

    def bwd(g):
        return (g * np.where(pos, np.asarray(1, dtype=x.dtype), y + 1),)

    return record_op(out, (x,), bwd)


@dataclass
class RunningMoments:
    """Exponential moving estimates of per-feature mean and variance."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, n_features, dtype=np.float32, momentum=0.9, eps=1e-5):
        return cls(
            mean=np.zeros(n_features, dtype=dtype),
            var=np.ones(n_features, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.mean = (m * self.mean + (1 - m) * batch_mean).astype(self.mean.dtype)
        self.var = (m * self.var + (1 - m) * batch_var).astype(self.var.dtype)

    def copy(self):
        return RunningMoments(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def batch_norm(x, gamma, beta, mode, state, update_running=True):
    """Per-feature normalization of a (B, F) batch.

    Train mode normalizes by batch statistics (biased variance) and folds
    them into the running moments; eval mode normalizes by the running
    moments. A single-row batch is degenerate in train mode.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm input must be (B, F), got {x.shape}")
    n_rows, n_features = x.shape
    if gamma.shape != (n_features,) or beta.shape != (n_features,):
        raise ShapeError(
            f"gamma/beta must be ({n_features},), got {gamma.shape} and {beta.shape}"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    eps = state.eps
    if mode == "train":
        if n_rows < 2:
            raise ShapeError("batch_norm train mode needs a batch of >= 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_running:
            state.update(mu, var)
    else:
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def bwd(g):
        ggamma = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.sum(axis=0) if beta.requires_grad else None
        if not x.requires_grad:
            return None, ggamma, gbeta
        gxhat = g * gamma.data
        if mode == "train":
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=0)
                - xhat * (gxhat * xhat).mean(axis=0)
            )
        else:
            gx = gxhat * inv_std
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return record_op(out, (x, gamma, beta), bwd)


def dense(x, weights, bias=None):
    """Affine map: x (..., F) with weights (F, O) and bias (O,) -> (..., O)."""
    if weights.ndim != 2:
        raise ShapeError(f"weights must be (F, O), got {weights.shape}")
    n_in, n_out = weights.shape
    if x.shape[-1] != n_in:
        raise ShapeError(f"input features {x.shape[-1]} != weight rows {n_in}")
    if bias is not None and bias.shape != (n_out,):
        raise ShapeError(f"bias must be ({n_out},), got {bias.shape}")
    y = x.data @ weights.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def bwd(g):
        g2 = g.reshape(-1, n_out)
        gx = (g @ weights.data.T) if x.requires_grad else None
        gw = x.data.reshape(-1, n_in).T @ g2 if weights.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return record_op(out, inputs, bwd)


def dropout(x, rate, mode, rng=None):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng for determinism")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale)
    return record_op(out, (x,), lambda g: (g * keep * scale,))


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw logits, accumulated in float64."""
    z = np.asarray(targets, dtype=np.float64).reshape(-1)
    v = logits.data.astype(np.float64).reshape(-1)
    if z.shape != v.shape:
        raise ShapeError(f"targets shape {z.shape} != logits shape {v.shape}")
    loss = np.maximum(v, 0) - v * z + np.log1p(np.exp(-np.abs(v)))
    out = Tensor(loss.mean(), dtype=np.float64)

    def bwd(g):
        p = 1.0 / (1.0 + np.exp(-v))
        return (((p - z) * (float(g) / v.size)).reshape(logits.shape),)

    return record_op(out, (logits,), bwd)


# Arithmetic sugar on Tensor; kept thin so ops stay the single source of truth.
Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__sub__ = sub
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.__neg__ = neg
