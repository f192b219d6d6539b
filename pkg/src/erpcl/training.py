"""Adam optimization, two-phase training, early stopping, cross-validation.

Phase one pretrains encoder plus projector on the contrastive objective
over subject pairs (lr 1e-3, weight decay 0.015). Phase two freezes the
encoder, caches its features, and trains the classifier on single trials
with binary cross-entropy (lr 5e-4). Both phases early-stop on a
validation metric and restore the best weights.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, backward, ops
from .autodiff.tensor import Tensor
from .contrastive import LossConfig, batch_loss
from .data import n_subject_pairs, sample_pairs
from .errors import DivergenceError, SamplingError
from .evaluation import auc, evaluate
from .model import EncoderConfig, encoder_forward, classifier_forward, init_params, projector_forward


@dataclass
class OptimState:
    """Adam moments plus hyperparameters, keyed by parameter name."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state):
    """One Adam update with bias correction; weight decay enters the gradient.

    Aborts without touching any parameter if a gradient is non-finite.
    """
    grads = {}
    for name, p in named_params:
        if p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
        grads[name] = g

    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, p in named_params:
        g = grads.get(name)
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data -= (state.lr * update).astype(p.dtype)


@dataclass
class TrainPlan:
    """Knobs for one training phase."""

    phase: str = "pretrain"  # "pretrain" | "classifier"
    max_epochs: int = 100
    patience: int = 30
    val_fraction: float = 0.2
    seed: int = 0
    lr: float = None
    weight_decay: float = None
    batch_size: int = 64
    n_avg: int = 3
    n_neg: int = 5
    n_anchor: int = 1
    temperature: float = 0.5

    def __post_init__(self):
        if self.phase not in ("pretrain", "classifier"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError(
                f"patience must lie in [0, max_epochs), got {self.patience} vs {self.max_epochs}"
            )
        if self.lr is None:
            self.lr = 1e-3 if self.phase == "pretrain" else 5e-4
        if self.weight_decay is None:
            self.weight_decay = 0.015 if self.phase == "pretrain" else 0.0

    @property
    def loss(self):
        return "contrastive" if self.phase == "pretrain" else "bce"


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_metric: float
    seconds: float


def history_csv(history):
    lines = ["epoch,train_loss,val_metric,seconds"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss:.8f},{h.val_metric:.8f},{h.seconds:.3f}")
    return "\n".join(lines) + "\n"


def split_subjects(dataset, val_fraction, seed, min_val=1):
    """Subject-disjoint train/validation split of one dataset.

    The contrastive phase validates on subject pairs, so it needs
    min_val=2 (and therefore at least four subjects overall).
    """
    subjects = dataset.usable_subjects()
    n_val = max(min_val, int(round(len(subjects) * val_fraction)))
    if len(subjects) - n_val < max(2, min_val):
        raise SamplingError(
            f"{len(subjects)} usable subjects cannot supply a train split and "
            f"{n_val} validation subjects"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    val_ids = {subjects[i] for i in order[:n_val]}
    train_ids = [s for s in subjects if s not in val_ids]
    return dataset.restricted_to(train_ids), dataset.restricted_to(sorted(val_ids))


def _batch_to_tensor(batch):
    stackable = np.concatenate([batch.erp_a, batch.non_erp_a, batch.erp_b, batch.non_erp_b])
    return Tensor(stackable.astype(np.float32))


def _batch_embeddings(z, batch):
    n_anchor = len(batch.erp_a)
    n_neg = len(batch.non_erp_a)
    rows = [ops.select_row(z, i) for i in range(z.shape[0])]
    half = n_anchor + n_neg
    emb_a = [(rows[i], 1) for i in range(n_anchor)]
    emb_a += [(rows[n_anchor + i], 0) for i in range(n_neg)]
    emb_b = [(rows[half + i], 1) for i in range(n_anchor)]
    emb_b += [(rows[half + n_anchor + i], 0) for i in range(n_neg)]
    return emb_a, emb_b


def _contrastive_batch_loss(params, batch, temperature, mode, rng=None):
    x = _batch_to_tensor(batch)
    h = encoder_forward(x, params)
    z = projector_forward(h, params, mode=mode, rng=rng, frozen_stats=(mode == "eval"))
    emb_a, emb_b = _batch_embeddings(z, batch)
    return batch_loss(emb_a, emb_b, temperature)


def _mean_val_loss(params, val_batches, temperature):
    losses = [
        _contrastive_batch_loss(params, b, temperature, mode="eval").item()
        for b in val_batches
    ]
    return float(np.mean(losses))


def pretrain_contrastive(dataset_train, dataset_val, config, plan, loss_config=None):
    """Contrastive pretraining of encoder and projector over subject pairs.

    Validation is the mean contrastive loss on a fixed draw of the
    validation subjects' pairs, evaluated with frozen statistics. Returns
    the trained params (best validation weights restored) and the history.
    """
    loss_config = loss_config or LossConfig(temperature=plan.temperature)
    params = init_params(config, seed=plan.seed)
    params.set_requires_grad(("encoder", "projector"), True)
    params.set_requires_grad(("classifier",), False)
    trained = params.named_parameters(("encoder", "projector"))
    state = OptimState(lr=plan.lr, weight_decay=plan.weight_decay)
    dropout_rng = np.random.default_rng(np.random.SeedSequence(entropy=(plan.seed, 101)))

    n_train_subjects = len(
        dataset_train.usable_subjects(plan.n_avg * plan.n_anchor, plan.n_avg * plan.n_neg)
    )
    pairs_per_epoch = n_subject_pairs(n_train_subjects)
    stream = sample_pairs(
        dataset_train, n_avg=plan.n_avg, n_neg=plan.n_neg, seed=plan.seed, epochs=None,
        n_anchor=plan.n_anchor,
    )
    # Three redraws of the validation pairs flatten the sampling noise in
    # the early-stopping metric; the draw stays fixed across epochs.
    val_batches = list(
        sample_pairs(
            dataset_val, n_avg=plan.n_avg, n_neg=plan.n_neg, seed=plan.seed + 1, epochs=3,
            n_anchor=plan.n_anchor,
        )
    )

    history = []
    best = {"metric": np.inf, "snapshot": params.snapshot(), "epoch": -1}
    diverged = False
    for epoch in range(plan.max_epochs):
        started = time.perf_counter()
        epoch_losses = []
        for _ in range(pairs_per_epoch):
            batch = next(stream)
            for _, p in trained:
                p.zero_grad()
            with Tape() as tape:
                loss = _contrastive_batch_loss(
                    params, batch, loss_config.temperature, mode="train", rng=dropout_rng
                )
            value = loss.item()
            if not np.isfinite(value):
                diverged = True
                break
            backward(loss, tape)
            try:
                adam_step(trained, state)
            except DivergenceError:
                diverged = True
                break
            epoch_losses.append(value)
        if diverged:
            break
        val_metric = _mean_val_loss(params, val_batches, loss_config.temperature)
        history.append(
            EpochStats(epoch, float(np.mean(epoch_losses)), val_metric, time.perf_counter() - started)
        )
        if val_metric < best["metric"]:
            best = {"metric": val_metric, "snapshot": params.snapshot(), "epoch": epoch}
        elif epoch - best["epoch"] > plan.patience:
            break

    params.restore(best["snapshot"])
    return params, history


def _single_class(dataset):
    labels = {t.label for t in dataset.trials}
    return len(labels) < 2


def _cached_features(params, trials, batch_size=256):
    chunks = []
    for start in range(0, len(trials), batch_size):
        chunk = trials[start : start + batch_size]
        x = Tensor(np.stack([t.data for t in chunk]).astype(np.float32))
        chunks.append(encoder_forward(x, params).data)
    feats = np.concatenate(chunks)
    labels = np.array([t.label for t in trials], dtype=np.float64)
    return feats, labels


def _classifier_scores(params, features, batch_size=256):
    out = np.empty(len(features), dtype=np.float64)
    for start in range(0, len(features), batch_size):
        x = Tensor(features[start : start + batch_size])
        out[start : start + len(x.data)] = classifier_forward(x, params, mode="eval").data
    return out


def train_classifier(params, dataset_train, dataset_val, plan):
    """Train the classifier on single trials over a frozen encoder.

    Encoder features are cached once (the encoder receives no gradients
    and its bytes never change). Validation AUC drives early stopping.
    """
    if _single_class(dataset_train):
        raise SamplingError("classifier training set holds a single class")
    if _single_class(dataset_val):
        raise SamplingError("classifier validation set holds a single class")

    params.set_requires_grad(("encoder", "projector"), False)
    params.set_requires_grad(("classifier",), True)
    trained = params.named_parameters(("classifier",))
    state = OptimState(lr=plan.lr, weight_decay=plan.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(plan.seed, 202)))

    feats_train, y_train = _cached_features(params, dataset_train.trials)
    feats_val, y_val = _cached_features(params, dataset_val.trials)

    history = []
    best = {"metric": -np.inf, "snapshot": params.snapshot(), "epoch": -1}
    diverged = False
    n = len(feats_train)
    for epoch in range(plan.max_epochs):
        started = time.perf_counter()
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, plan.batch_size):
            idx = order[start : start + plan.batch_size]
            for _, p in trained:
                p.zero_grad()
            with Tape() as tape:
                logits = classifier_forward(Tensor(feats_train[idx]), params, mode="train")
                loss = ops.bce_with_logits(logits, y_train[idx])
            value = loss.item()
            if not np.isfinite(value):
                diverged = True
                break
            backward(loss, tape)
            try:
                adam_step(trained, state)
            except DivergenceError:
                diverged = True
                break
            epoch_losses.append(value)
        if diverged:
            break
        val_metric = auc(_classifier_scores(params, feats_val), y_val.astype(int))
        history.append(
            EpochStats(epoch, float(np.mean(epoch_losses)), val_metric, time.perf_counter() - started)
        )
        if val_metric > best["metric"]:
            best = {"metric": val_metric, "snapshot": params.snapshot(), "epoch": epoch}
        elif epoch - best["epoch"] > plan.patience:
            break

    params.restore(best["snapshot"])
    return params, history


def partition_subjects(subject_ids, k, rng):
    """Shuffle subjects and deal them into k folds (sizes differ by <= 1)."""
    subject_ids = list(subject_ids)
    if k < 1 or k > len(subject_ids):
        raise ValueError(f"k must be in [1, {len(subject_ids)}], got {k}")
    order = rng.permutation(len(subject_ids))
    folds = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(subject_ids[idx])
    return [sorted(f) for f in folds]


def _run_fold(dataset, train_ids, val_ids, holdout_set, config, pre_plan, clf_plan):
    train_ds = dataset.restricted_to(train_ids)
    val_ds = dataset.restricted_to(val_ids)
    params, _ = pretrain_contrastive(train_ds, val_ds, config, pre_plan)
    params, _ = train_classifier(params, train_ds, val_ds, clf_plan)
    return evaluate(params, holdout_set)


def crossval(
    dataset,
    k=5,
    repeats=2,
    holdout_subjects=2,
    seed=0,
    config=None,
    pretrain_plan=None,
    classifier_plan=None,
    jobs=1,
):
    """Repeated k-fold over training subjects with a fixed held-out test set.

    Holdout subjects never appear in any training or validation split;
    every fold's model is evaluated on them. holdout_subjects may be a
    count (chosen with the seed) or an explicit list of subject ids.
    Returns one EvalReport per (repeat, fold).
    """
    config = config or EncoderConfig()
    subjects = dataset.usable_subjects()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 303)))
    if isinstance(holdout_subjects, int):
        chosen = rng.permutation(len(subjects))[:holdout_subjects]
        holdout = sorted(subjects[i] for i in chosen)
    else:
        holdout = sorted(holdout_subjects)
        missing = [s for s in holdout if s not in subjects]
        if missing:
            raise SamplingError(f"holdout subjects not in dataset: {missing}")
    pool = [s for s in subjects if s not in holdout]
    if k > len(pool):
        raise ValueError(f"k={k} exceeds the {len(pool)} non-holdout subjects")
    holdout_set = dataset.restricted_to(holdout)

    if len(pool) // k < 2:
        raise SamplingError(
            f"k={k} makes folds of fewer than 2 subjects; the contrastive phase "
            f"cannot validate on a single subject (pool has {len(pool)})"
        )

    runs = []
    for rep in range(repeats):
        fold_rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 404, rep)))
        folds = partition_subjects(pool, k, fold_rng)
        for fold_idx, val_ids in enumerate(folds):
            assert not set(val_ids) & set(holdout)
            train_ids = [s for s in pool if s not in set(val_ids)]
            assert not set(train_ids) & set(val_ids)
            run_seed = seed + 1000 * (rep + 1) + fold_idx
            pre = replace(pretrain_plan or TrainPlan(phase="pretrain"), seed=run_seed)
            clf = replace(
                classifier_plan or TrainPlan(phase="classifier"), phase="classifier", seed=run_seed
            )
            runs.append((train_ids, val_ids, pre, clf))

    def execute(run):
        train_ids, val_ids, pre, clf = run
        return _run_fold(dataset, train_ids, val_ids, holdout_set, config, pre, clf)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool_exec:
            return list(pool_exec.map(execute, runs))
    return [execute(run) for run in runs]
