"""Length-preserving 1-D correlation kernels with two interchangeable backends.

The compiled extension (``_native``) is preferred when importable; the
vectorized numpy module (``_ref``) is the fallback. Set ``ERPCL_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` reports which one is active.

Padding convention: ``pad_left = (taps - 1) // 2``, remainder on the right,
so even kernel lengths put the extra zero after the signal.
"""

import os

import numpy as np

from ...errors import ShapeError
from . import _ref

if os.environ.get("ERPCL_PURE_PYTHON"):
    _impl = _ref
else:
    try:
        from . import _native as _impl
    except ImportError:
        _impl = _ref

BACKEND = _impl.BACKEND

_DTYPES = (np.float32, np.float64)


def same_pad_left(taps):
    return (taps - 1) // 2


def _check(*arrays):
    dtype = arrays[0].dtype
    for a in arrays:
        if a.dtype != dtype:
            raise ShapeError(f"kernel operands must share a dtype, got {a.dtype} vs {dtype}")
    if dtype not in _DTYPES:
        raise ShapeError(f"kernel operands must be float32 or float64, got {dtype}")
    return tuple(np.ascontiguousarray(a) for a in arrays)


def depthwise_corr(x, kernels):
    """Cross-correlate each row of x (B, C, N) with each kernel (K, P) -> (B, K, C, N)."""
    x, kernels = _check(x, kernels)
    nb, nc, nt = x.shape
    nk, taps = kernels.shape
    out = np.zeros((nb, nk, nc, nt), dtype=x.dtype)
    _impl.dw_fwd(x, kernels, out, same_pad_left(taps))
    return out


def depthwise_corr_grad_input(gy, kernels):
    gy, kernels = _check(gy, kernels)
    nb, _, nc, nt = gy.shape
    gx = np.zeros((nb, nc, nt), dtype=gy.dtype)
    _impl.dw_bwd_x(gy, kernels, gx, same_pad_left(kernels.shape[1]))
    return gx


def depthwise_corr_grad_kernels(gy, x, taps):
    gy, x = _check(gy, x)
    nk = gy.shape[1]
    gk = np.zeros((nk, taps), dtype=gy.dtype)
    _impl.dw_bwd_k(gy, x, gk, same_pad_left(taps))
    return gk


def channel_mix_corr(x, weights):
    """Multichannel correlation: x (B, Ci, N) with weights (Co, Ci, P) -> (B, Co, N)."""
    x, weights = _check(x, weights)
    nb, _, nt = x.shape
    no, _, taps = weights.shape
    out = np.zeros((nb, no, nt), dtype=x.dtype)
    _impl.mc_fwd(x, weights, out, same_pad_left(taps))
    return out


def channel_mix_corr_grad_input(gy, weights):
    gy, weights = _check(gy, weights)
    nb, _, nt = gy.shape
    gx = np.zeros((nb, weights.shape[1], nt), dtype=gy.dtype)
    _impl.mc_bwd_x(gy, weights, gx, same_pad_left(weights.shape[2]))
    return gx


def channel_mix_corr_grad_weights(gy, x, taps):
    gy, x = _check(gy, x)
    gw = np.zeros((gy.shape[1], x.shape[1], taps), dtype=gy.dtype)
    _impl.mc_bwd_w(gy, x, gw, same_pad_left(taps))
    return gw
