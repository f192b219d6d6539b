"""Central finite-difference verification of every backward rule.

Each suite builds a double-precision scalar loss, differentiates it on a
tape, then perturbs every checked input elementwise (central differences,
h = 1e-3) and compares. The reported figure per suite is

    max over elements of |analytic - numeric| / max(1, |numeric|)

which the whole operation set must keep below 1e-4.
"""

from __future__ import annotations

import warnings

import numpy as np

from .autodiff import Tape, backward, ops
from .autodiff.ops import RunningMoments
from .autodiff.tensor import Tensor
from .contrastive import batch_loss, cosine_sim
from .model import (
    EncoderConfig,
    classifier_forward,
    encoder_forward,
    init_params,
    projector_forward,
)

TOLERANCE = 1e-4
STEP = 1e-3


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def check_gradients(make_loss, tensors, h=STEP):
    """Max relative error between taped and finite-difference gradients.

    make_loss must be a pure function of the tensors' current .data (any
    randomness inside must be reseeded per call).
    """
    for t in tensors.values():
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        loss = make_loss()
    backward(loss, tape)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }

    worst = 0.0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = make_loss().item()
            flat[i] = saved - h
            down = make_loss().item()
            flat[i] = saved
            numeric[i] = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst


def _rng(tag):
    return np.random.default_rng(np.random.SeedSequence(entropy=(8080, tag)))


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _projected_sum(out, rng):
    """Random-projection scalar loss; catches permuted or missorted grads."""
    weights = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return ops.sum(ops.mul(out, weights))


# ---------------------------------------------------------------------------
# per-operation suites


def check_conv1d_same_odd():
    rng = _rng(1)
    x, k, b = _t(rng, 3, 9), _t(rng, 2, 3), _t(rng, 2)
    return check_gradients(
        lambda: _projected_sum(ops.conv1d_same(x, k, b), _rng(101)),
        {"x": x, "k": k, "b": b},
    )


def check_conv1d_same_even():
    rng = _rng(2)
    x, k = _t(rng, 2, 8), _t(rng, 2, 4)
    return check_gradients(
        lambda: _projected_sum(ops.conv1d_same(x, k), _rng(102)), {"x": x, "k": k}
    )


def check_conv1d_same_long_kernel():
    rng = _rng(3)
    x, k = _t(rng, 1, 3), _t(rng, 1, 5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return check_gradients(
            lambda: _projected_sum(ops.conv1d_same(x, k), _rng(103)), {"x": x, "k": k}
        )


def check_conv1d_same_batched():
    rng = _rng(4)
    x, k = _t(rng, 2, 2, 7), _t(rng, 2, 3)
    return check_gradients(
        lambda: _projected_sum(ops.conv1d_same(x, k), _rng(104)), {"x": x, "k": k}
    )


def check_conv1d_channels():
    rng = _rng(5)
    x, w, b = _t(rng, 2, 3, 8), _t(rng, 4, 3, 3), _t(rng, 4)
    return check_gradients(
        lambda: _projected_sum(ops.conv1d_channels(x, w, b), _rng(105)),
        {"x": x, "w": w, "b": b},
    )


def check_channel_collapse():
    rng = _rng(6)
    x, w = _t(rng, 3, 5), _t(rng, 3)
    return check_gradients(
        lambda: _projected_sum(ops.channel_collapse(x, w), _rng(106)), {"x": x, "w": w}
    )


def check_spatial_collapse():
    rng = _rng(7)
    x, w = _t(rng, 2, 2, 3, 6), _t(rng, 2, 3)
    return check_gradients(
        lambda: _projected_sum(ops.spatial_collapse(x, w), _rng(107)), {"x": x, "w": w}
    )


def check_avg_pool_time():
    rng = _rng(8)
    x = _t(rng, 2, 3, 7)  # window 2 drops the trailing sample
    return check_gradients(
        lambda: _projected_sum(ops.avg_pool_time(x, 2), _rng(108)), {"x": x}
    )


def check_elu():
    rng = _rng(9)
    raw = rng.standard_normal((4, 5))
    raw += np.where(raw >= 0, 0.15, -0.15)  # keep the kink out of the stencil
    x = Tensor(raw, dtype=np.float64)
    return check_gradients(lambda: _projected_sum(ops.elu(x), _rng(109)), {"x": x})


def check_batch_norm_train():
    rng = _rng(10)
    x, g, b = _t(rng, 6, 4), _t(rng, 4), _t(rng, 4)

    def make_loss():
        state = RunningMoments.create(4, dtype=np.float64)
        out = ops.batch_norm(x, g, b, "train", state, update_running=False)
        return _projected_sum(out, _rng(110))

    return check_gradients(make_loss, {"x": x, "gamma": g, "beta": b})


def check_batch_norm_eval():
    rng = _rng(11)
    x, g, b = _t(rng, 5, 3), _t(rng, 3), _t(rng, 3)
    state = RunningMoments.create(3, dtype=np.float64)
    state.mean = rng.standard_normal(3)
    state.var = rng.uniform(0.5, 2.0, 3)
    return check_gradients(
        lambda: _projected_sum(ops.batch_norm(x, g, b, "eval", state), _rng(111)),
        {"x": x, "gamma": g, "beta": b},
    )


def check_dense():
    rng = _rng(12)
    x, w, b = _t(rng, 3, 4), _t(rng, 4, 2), _t(rng, 2)
    return check_gradients(
        lambda: _projected_sum(ops.dense(x, w, b), _rng(112)), {"x": x, "w": w, "b": b}
    )


def check_dropout():
    rng = _rng(13)
    x = _t(rng, 4, 6)

    def make_loss():
        out = ops.dropout(x, 0.3, "train", np.random.default_rng(909))
        return _projected_sum(out, _rng(113))

    return check_gradients(make_loss, {"x": x})


def check_cosine_sim():
    rng = _rng(14)
    a, b = _t(rng, 7), _t(rng, 7)
    return check_gradients(lambda: cosine_sim(a, b), {"a": a, "b": b})


def check_batch_loss():
    rng = _rng(15)
    vecs = {f"v{i}": _t(rng, 5) for i in range(6)}

    def make_loss():
        emb_a = [(vecs["v0"], 1), (vecs["v1"], 0), (vecs["v2"], 0)]
        emb_b = [(vecs["v3"], 1), (vecs["v4"], 0), (vecs["v5"], 0)]
        return batch_loss(emb_a, emb_b, 0.5)

    return check_gradients(make_loss, vecs)


def check_bce():
    rng = _rng(16)
    logits = _t(rng, 6)
    targets = (rng.random(6) > 0.5).astype(np.float64)
    return check_gradients(lambda: ops.bce_with_logits(logits, targets), {"logits": logits})


# ---------------------------------------------------------------------------
# composite layers and end-to-end losses, on the reduced configuration


def reduced_config():
    return EncoderConfig(
        n_channels=2, n_samples=16, sample_rate=16.0, kernel_lengths=(8, 4, 2),
        kernels_per_branch=2,
    )


def reduced_params(seed=0):
    return init_params(
        reduced_config(), seed=seed, pool=2, dropout=0.25,
        clf_filters=(3, 2), clf_kernels=(4, 2), clf_pool=2, dtype=np.float64,
    )


def _param_tensors(params, parts):
    return dict(params.named_parameters(parts))


def check_encoder_forward():
    params = reduced_params(1)
    x = _t(_rng(17), 2, 16)
    tensors = {"x": x, **_param_tensors(params, ("encoder",))}
    return check_gradients(
        lambda: _projected_sum(encoder_forward(x, params), _rng(117)), tensors
    )


def check_projector_forward():
    params = reduced_params(2)
    h = _t(_rng(18), 4, 6, 16)
    tensors = {"h": h, **_param_tensors(params, ("projector",))}

    def make_loss():
        out = projector_forward(h, params, mode="train", rng=np.random.default_rng(707))
        return _projected_sum(out, _rng(118))

    return check_gradients(make_loss, tensors)


def check_classifier_forward():
    params = reduced_params(3)
    h = _t(_rng(19), 3, 6, 16)
    tensors = {"h": h, **_param_tensors(params, ("classifier",))}
    return check_gradients(
        lambda: _projected_sum(classifier_forward(h, params, mode="train"), _rng(119)),
        tensors,
    )


def check_end_to_end_contrastive():
    params = reduced_params(4)
    x = _t(_rng(20), 6, 2, 16)  # subject A rows 0..2, subject B rows 3..5
    tensors = {"x": x, **_param_tensors(params, ("encoder", "projector"))}

    def make_loss():
        h = encoder_forward(x, params)
        z = projector_forward(h, params, mode="train", rng=np.random.default_rng(808))
        rows = [ops.select_row(z, i) for i in range(6)]
        emb_a = [(rows[0], 1), (rows[1], 0), (rows[2], 0)]
        emb_b = [(rows[3], 1), (rows[4], 0), (rows[5], 0)]
        return batch_loss(emb_a, emb_b, 0.5)

    return check_gradients(make_loss, tensors)


def check_end_to_end_bce():
    params = reduced_params(5)
    x = _t(_rng(21), 4, 2, 16)
    targets = np.array([1.0, 0.0, 1.0, 0.0])
    tensors = {"x": x, **_param_tensors(params, ("encoder", "classifier"))}

    def make_loss():
        h = encoder_forward(x, params)
        logits = classifier_forward(h, params, mode="train")
        return ops.bce_with_logits(logits, targets)

    return check_gradients(make_loss, tensors)


SUITES = [
    ("conv1d_same/odd", check_conv1d_same_odd),
    ("conv1d_same/even", check_conv1d_same_even),
    ("conv1d_same/kernel_longer_than_signal", check_conv1d_same_long_kernel),
    ("conv1d_same/batched", check_conv1d_same_batched),
    ("conv1d_channels", check_conv1d_channels),
    ("channel_collapse", check_channel_collapse),
    ("spatial_collapse", check_spatial_collapse),
    ("avg_pool_time", check_avg_pool_time),
    ("elu", check_elu),
    ("batch_norm/train", check_batch_norm_train),
    ("batch_norm/eval", check_batch_norm_eval),
    ("dense", check_dense),
    ("dropout", check_dropout),
    ("cosine_sim", check_cosine_sim),
    ("batch_loss", check_batch_loss),
    ("bce_with_logits", check_bce),
    ("encoder_forward", check_encoder_forward),
    ("projector_forward", check_projector_forward),
    ("classifier_forward", check_classifier_forward),
    ("end_to_end/contrastive", check_end_to_end_contrastive),
    ("end_to_end/bce", check_end_to_end_bce),
]


def run_all():
    """name -> max relative error, for every suite."""
    return {name: fn() for name, fn in SUITES}


def format_table(results):
    width = max(len(name) for name in results) + 2
    lines = [f"{'layer':<{width}}max_rel_err  status"]
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        lines.append(f"{name:<{width}}{err:.3e}    {status}")
    return "\n".join(lines)
