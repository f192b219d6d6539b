"""Vectorized numpy implementation of the correlation kernels.

Used when the compiled extension is unavailable or disabled via
ERPCL_PURE_PYTHON=1. Fills preallocated output arrays, mirroring the
contract of the native module: every output array arrives zero-filled.
"""

import numpy as np

BACKEND = "python"


def _windows(x, length, pad_left, pad_right):
    """Length-`length` sliding windows over the (zero-padded) last axis."""
    pad = [(0, 0)] * (x.ndim - 1) + [(pad_left, pad_right)]
    padded = np.pad(x, pad)
    return np.lib.stride_tricks.sliding_window_view(padded, length, axis=-1)


def dw_fwd(x, k, out, pad_left):
    _, taps = k.shape
    win = _windows(x, taps, pad_left, taps - 1 - pad_left)  # (B, C, N, P)
    np.einsum("bcnp,kp->bkcn", win, k, out=out, optimize=True)


def dw_bwd_x(gy, k, gx, pad_left):
    # Gradient of a same-padded cross-correlation: correlate the upstream
    # gradient with the reversed kernel under mirrored padding.
    _, taps = k.shape
    win = _windows(gy, taps, taps - 1 - pad_left, pad_left)  # (B, K, C, N, P)
    np.einsum("bkcnp,kp->bcn", win, k[:, ::-1], out=gx, optimize=True)


def dw_bwd_k(gy, x, gk, pad_left):
    _, taps = gk.shape
    win = _windows(x, taps, pad_left, taps - 1 - pad_left)
    np.einsum("bcnp,bkcn->kp", win, gy, out=gk, optimize=True)


def mc_fwd(x, w, out, pad_left):
    _, _, taps = w.shape
    win = _windows(x, taps, pad_left, taps - 1 - pad_left)
    np.einsum("bcnp,ocp->bon", win, w, out=out, optimize=True)


def mc_bwd_x(gy, w, gx, pad_left):
    _, _, taps = w.shape
    win = _windows(gy, taps, taps - 1 - pad_left, pad_left)  # (B, Co, N, P)
    np.einsum("bonp,ocp->bcn", win, w[:, :, ::-1], out=gx, optimize=True)


def mc_bwd_w(gy, x, gw, pad_left):
    _, _, taps = gw.shape
    win = _windows(x, taps, pad_left, taps - 1 - pad_left)
    np.einsum("bcnp,bon->ocp", win, gy, out=gw, optimize=True)
