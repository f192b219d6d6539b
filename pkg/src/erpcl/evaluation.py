"""AUC, row-column speller decoding, per-subject reports, LDA baseline."""

from __future__ import annotations

import hashlib
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff.tensor import Tensor
from .errors import EvaluationError
from .model import classifier_forward, encoder_forward


def auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg), ties credited 0.5.

    Computed through midranks, which equals exhaustive pairwise counting
    exactly (both are sums of dyadic rationals over the same denominator).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvaluationError(
            f"scores and labels must be equal-length vectors, got {scores.shape} and {labels.shape}"
        )
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC is undefined with a single class present")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def speller_decode(trial_scores, layout):
    """Pick the (row, column) cell whose flash scores sum highest.

    trial_scores maps stimulus codes (1..R rows, R+1..R+C columns) to a
    score or list of scores. Ties break toward the lowest code.
    """
    rows, cols = layout
    totals = {}
    for code, value in trial_scores.items():
        totals[code] = float(np.sum(value))
    row_codes = range(1, rows + 1)
    col_codes = range(rows + 1, rows + cols + 1)
    missing = [c for c in (*row_codes, *col_codes) if c not in totals]
    if missing:
        raise EvaluationError(f"flash scores missing for codes {missing}")

    def best(codes):
        return max(codes, key=lambda c: (totals[c], -c))

    return best(row_codes) - 1, best(col_codes) - rows - 1


def _speller_blocks(trials, layout):
    """Chunk a subject's coded trials into full selection blocks, in order."""
    rows, cols = layout
    flashes = rows + cols
    coded = [t for t in trials if t.stimulus_code > 0]
    for start in range(0, len(coded) - flashes + 1, flashes):
        block = coded[start : start + flashes]
        codes = sorted(t.stimulus_code for t in block)
        if codes != list(range(1, flashes + 1)):
            raise EvaluationError(
                f"selection block starting at coded trial {start} does not cover "
                f"every row and column exactly once"
            )
        yield block


def _true_command(block, rows):
    target_rows = [t.stimulus_code for t in block if t.label == 1 and t.stimulus_code <= rows]
    target_cols = [t.stimulus_code for t in block if t.label == 1 and t.stimulus_code > rows]
    if len(target_rows) != 1 or len(target_cols) != 1:
        raise EvaluationError("selection block must label exactly one row and one column flash")
    return target_rows[0] - 1, target_cols[0] - rows - 1


@dataclass
class EvalReport:
    per_subject_auc: dict
    auc_mean: float
    auc_std: float
    n_trials: int
    speller_accuracy: float = None
    n_selections: int = 0
    config_fingerprint: str = ""
    extras: dict = field(default_factory=dict)

    def to_text(self):
        lines = [
            f"auc_mean: {self.auc_mean:.6f}",
            f"auc_std: {self.auc_std:.6f}",
            f"n_trials: {self.n_trials}",
        ]
        if self.speller_accuracy is not None:
            lines.append(f"speller_accuracy: {self.speller_accuracy:.6f}")
            lines.append(f"n_selections: {self.n_selections}")
        if self.config_fingerprint:
            lines.append(f"config_fingerprint: {self.config_fingerprint}")
        for key, value in sorted(self.extras.items()):
            lines.append(f"{key}: {value}")
        for sid in sorted(self.per_subject_auc):
            lines.append(f"subject_{sid}_auc: {self.per_subject_auc[sid]:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self, per_subject_counts=None, per_subject_speller=None):
        buf = io.StringIO()
        buf.write("subject_id,auc,n_trials,speller_acc\n")
        for sid in sorted(self.per_subject_auc):
            n = (per_subject_counts or {}).get(sid, "")
            acc = (per_subject_speller or {}).get(sid, "")
            acc = f"{acc:.6f}" if acc != "" else ""
            buf.write(f"{sid},{self.per_subject_auc[sid]:.6f},{n},{acc}\n")
        return buf.getvalue()


def aggregate_reports(reports):
    """Mean/std over per-subject AUCs pooled across a list of reports."""
    pooled = {}
    for rep in reports:
        for sid, value in rep.per_subject_auc.items():
            pooled.setdefault(sid, []).append(value)
    per_subject = {sid: float(np.mean(v)) for sid, v in pooled.items()}
    values = [v for results in pooled.values() for v in results]
    accs = [r.speller_accuracy for r in reports if r.speller_accuracy is not None]
    return EvalReport(
        per_subject_auc=per_subject,
        auc_mean=float(np.mean(values)),
        auc_std=float(np.std(values)),
        n_trials=int(np.sum([r.n_trials for r in reports])),
        speller_accuracy=float(np.mean(accs)) if accs else None,
        n_selections=int(np.sum([r.n_selections for r in reports])),
    )


def config_fingerprint(mapping):
    text = ";".join(f"{k}={mapping[k]}" for k in sorted(mapping))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def score_trials(params, trials, batch_size=256):
    """Single-trial logits through the frozen encoder and classifier."""
    scores = np.empty(len(trials), dtype=np.float64)
    for start in range(0, len(trials), batch_size):
        chunk = trials[start : start + batch_size]
        x = Tensor(np.stack([t.data for t in chunk]).astype(np.float32))
        h = encoder_forward(x, params)
        logits = classifier_forward(h, params, mode="eval")
        scores[start : start + len(chunk)] = logits.data
    return scores


def evaluate(params, dataset, layout=(6, 6), batch_size=256, fingerprint=""):
    """Per-subject AUC plus speller accuracy when stimulus codes are present."""
    if not dataset.trials:
        raise EvaluationError("test set is empty")
    per_subject, sel_hits, sel_total = {}, 0, 0
    per_subject_speller = {}
    for sid in dataset.subjects():
        trials = dataset.trials_of(sid)
        scores = score_trials(params, trials, batch_size)
        labels = np.array([t.label for t in trials])
        if labels.min() == labels.max():
            warnings.warn(f"subject {sid} has a single class; skipping its AUC", stacklevel=2)
        else:
            per_subject[sid] = auc(scores, labels)
        score_of = {id(t): s for t, s in zip(trials, scores)}
        hits = total = 0
        for block in _speller_blocks(trials, layout):
            flash_scores = {t.stimulus_code: score_of[id(t)] for t in block}
            if speller_decode(flash_scores, layout) == _true_command(block, layout[0]):
                hits += 1
            total += 1
        if total:
            per_subject_speller[sid] = hits / total
            sel_hits += hits
            sel_total += total
    if not per_subject:
        raise EvaluationError("no test subject holds both classes; AUC is undefined")
    values = list(per_subject.values())
    return EvalReport(
        per_subject_auc=per_subject,
        auc_mean=float(np.mean(values)),
        auc_std=float(np.std(values)),
        n_trials=len(dataset.trials),
        speller_accuracy=(sel_hits / sel_total) if sel_total else None,
        n_selections=sel_total,
        config_fingerprint=fingerprint,
        extras={"per_subject_speller": per_subject_speller} if per_subject_speller else {},
    )


# ---------------------------------------------------------------------------
# shrinkage LDA baseline


def _features(trials, decimate):
    return np.stack([t.data[:, ::decimate].reshape(-1) for t in trials]).astype(np.float64)


def lda_baseline(train_trials, test_trials, shrinkage=0.1, decimate=4):
    """Binary LDA scores with covariance shrunk toward its mean diagonal."""
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError(f"shrinkage must be in [0, 1], got {shrinkage}")
    x = _features(train_trials, decimate)
    y = np.array([t.label for t in train_trials])
    if len(np.unique(y)) < 2:
        raise EvaluationError("LDA needs both classes in the training trials")
    x0, x1 = x[y == 0], x[y == 1]
    mu0, mu1 = x0.mean(axis=0), x1.mean(axis=0)
    cov = 0.5 * (np.cov(x0, rowvar=False, bias=True) + np.cov(x1, rowvar=False, bias=True))
    cov = np.atleast_2d(cov)
    nu = float(np.trace(cov)) / cov.shape[0]
    shrunk = (1.0 - shrinkage) * cov + shrinkage * nu * np.eye(cov.shape[0])
    if shrinkage == 0.0 and np.linalg.cond(shrunk) > 1e12:
        raise EvaluationError("covariance is singular with shrinkage=0; use shrinkage > 0")
    try:
        w = np.linalg.solve(shrunk, mu1 - mu0)
    except np.linalg.LinAlgError as exc:
        raise EvaluationError(
            f"covariance is singular (shrinkage={shrinkage}); use shrinkage > 0"
        ) from exc
    b = -0.5 * float((mu0 + mu1) @ w)
    return _features(test_trials, decimate) @ w + b
