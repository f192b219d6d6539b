"""Cosine similarity and the temperature-scaled contrastive objective.

A mini-batch holds one subject pair {A, B}. Each of A's ERP embeddings is
an anchor whose candidates are drawn from B only: the index-matched ERP of
B is the single positive, B's non-ERP embeddings are the negatives.
Within-subject pairs never enter the loss. Similarities are computed at
the embedding precision; the log-sum-exp is accumulated in double
precision with the max-shift trick.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.tensor import Tensor, record_op
from .errors import SamplingError, ShapeError

ERP = 1
NON_ERP = 0


@dataclass
class LossConfig:
    """Temperature and the rule deciding which cross-subject pairs are positive."""

    temperature: float = 0.5
    positives_rule: str = "erp-erp"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.positives_rule != "erp-erp":
            raise ValueError(f"unknown positives rule {self.positives_rule!r}")


def cosine_sim(a, b):
    """Inner product over the product of Euclidean norms, in [-1, 1]."""
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"cosine_sim expects vectors, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.shape} vs {b.shape}")
    norm_a = np.sqrt((a.data * a.data).sum())
    norm_b = np.sqrt((b.data * b.data).sum())
    if norm_a == 0 or norm_b == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    denom = norm_a * norm_b
    s = float(a.data @ b.data) / float(denom)
    out = Tensor(np.asarray(s, dtype=a.dtype))

    def bwd(g):
        ga = g * (b.data / denom - s * a.data / (norm_a * norm_a)) if a.requires_grad else None
        gb = g * (a.data / denom - s * b.data / (norm_b * norm_b)) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), bwd)


def _ntxent_from_sims(sims, positive_index, temperature):
    """-log softmax(sims / tau)[positive], stabilized by the max shift."""
    z = sims.data.astype(np.float64) / temperature
    shift = z.max()
    exps = np.exp(z - shift)
    log_denom = shift + np.log(exps.sum())
    out = Tensor(np.asarray(log_denom - z[positive_index]), dtype=np.float64)

    def bwd(g):
        probs = exps / exps.sum()
        probs[positive_index] -= 1.0
        return (float(g) * probs / temperature,)

    return record_op(out, (sims,), bwd)


def ntxent_per_anchor(anchor, candidates, temperature):
    """Contrastive cross-entropy for one anchor against its candidate set.

    candidates is a sequence of (embedding, is_positive) with exactly one
    positive; the denominator runs over the full candidate set.
    """
    from .autodiff import ops

    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidate set is empty")
    positives = [i for i, (_, is_pos) in enumerate(candidates) if is_pos]
    if len(positives) != 1:
        raise ValueError(f"need exactly one positive candidate, got {len(positives)}")
    sims = ops.stack([cosine_sim(anchor, emb) for emb, _ in candidates])
    return _ntxent_from_sims(sims, positives[0], temperature)


def _split_by_label(embeddings, subject):
    erps, negs = [], []
    for emb, label in embeddings:
        if label == ERP:
            erps.append(emb)
        elif label == NON_ERP:
            negs.append(emb)
        else:
            raise ValueError(f"labels must be 0 or 1, got {label!r}")
    if not erps:
        raise SamplingError(f"subject {subject} contributed no ERP embedding to the batch")
    return erps, negs


def batch_loss(embeddings_a, embeddings_b, temperature):
    """Total mini-batch loss: anchored-on-A terms plus anchored-on-B terms.

    Each argument is a list of (embedding, label) for one subject of the
    pair. With several ERP embeddings per subject, anchors pair up by
    index and the remaining opposite-side ERPs stay out of the candidate
    set, keeping every softmax single-positive.
    """
    from .autodiff import ops

    erps_a, negs_a = _split_by_label(embeddings_a, "A")
    erps_b, negs_b = _split_by_label(embeddings_b, "B")
    if len(erps_a) != len(erps_b):
        raise SamplingError(
            f"anchor counts differ: {len(erps_a)} ERP embeddings for A vs {len(erps_b)} for B"
        )

    total = None
    for anchor, positive, negatives in (
        *((erps_a[i], erps_b[i], negs_b) for i in range(len(erps_a))),
        *((erps_b[i], erps_a[i], negs_a) for i in range(len(erps_b))),
    ):
        candidates = [(positive, True)] + [(n, False) for n in negatives]
        term = ntxent_per_anchor(anchor, candidates, temperature)
        total = term if total is None else ops.add(total, term)
    return total
