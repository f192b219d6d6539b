"""Command-line entry point: synth, pretrain, train, eval, crossval, gradcheck.

Every run resolves its full configuration (defaults included) and writes
it to the output directory before any work starts. Exit codes: 0 success,
1 validation error (bad flags, malformed or missing inputs), 2 runtime
failure (divergence, failed checks, unexpected errors).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, gradcheck, training
from .autodiff import BACKEND
from .errors import DivergenceError, EvaluationError, FormatError, SamplingError, ShapeError
from .model import EncoderConfig, load_checkpoint, save_checkpoint

VALIDATION_ERRORS = (
    FormatError,
    SamplingError,
    ShapeError,
    EvaluationError,
    FileNotFoundError,
    IsADirectoryError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=None, help="output directory")


def _add_training_flags(parser):
    parser.add_argument("--temperature", type=float, default=0.5)
    parser.add_argument("--n-avg", type=int, default=3)
    parser.add_argument("--n-neg", type=int, default=5)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--weight-decay", type=float, default=None)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--patience", type=int, default=30)
    parser.add_argument("--val-fraction", type=float, default=0.2)
    parser.add_argument("--val", type=Path, default=None, help="optional validation ERPD file")


def _add_model_flags(parser):
    parser.add_argument("--branches", type=int, default=3)
    parser.add_argument("--kernels", type=str, default="64,32,16", help="comma-separated lengths")
    parser.add_argument("--kernels-per-branch", type=int, default=8)
    parser.add_argument("--proj-pool", type=int, default=4)
    parser.add_argument("--dropout", type=float, default=0.25)


def build_parser():
    parser = _Parser(prog="erpcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic oddball ERPD dataset")
    _add_common(p)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--trials", type=int, default=120, help="trials per subject")
    p.add_argument("--target-ratio", type=float, default=1.0 / 6.0)
    p.add_argument("--amplitude-min", type=float, default=3.0)
    p.add_argument("--amplitude-max", type=float, default=8.0)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--speller", action="store_true", help="arrange trials as speller selections")
    p.add_argument("--rows", type=int, default=6)
    p.add_argument("--cols", type=int, default=6)

    p = sub.add_parser("pretrain", help="contrastive pretraining of encoder + projector")
    _add_common(p)
    _add_training_flags(p)
    _add_model_flags(p)
    p.add_argument("--data", type=Path, required=True, help="training ERPD file")

    p = sub.add_parser("train", help="train the classifier over a frozen encoder")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--encoder", type=Path, default=None, help="pretrained ERPW checkpoint")
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test ERPD file")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--rows", type=int, default=6)
    p.add_argument("--cols", type=int, default=6)

    p = sub.add_parser("crossval", help="repeated k-fold with held-out test subjects")
    _add_common(p)
    _add_training_flags(p)
    _add_model_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--holdout", type=int, default=2, help="held-out test subject count")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every layer")
    _add_common(p)
    return parser


def _resolved_config(args, overrides=None):
    skip = {"command", "out"}
    resolved = {"backend": BACKEND}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        resolved[key.replace("_", "-")] = value
    resolved.update(overrides or {})
    return resolved


def _plan_overrides(plan):
    return {"lr": plan.lr, "weight-decay": plan.weight_decay, "loss": plan.loss}


def _write_config(args, overrides=None):
    if args.out is None:
        return
    args.out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}: {v}" for k, v in _resolved_config(args, overrides).items()]
    (args.out / "config.txt").write_text("\n".join(lines) + "\n")


def _require_out(args):
    if args.out is None:
        raise ValueError("--out directory is required for this command")


def _parse_kernels(args):
    lengths = tuple(int(v) for v in args.kernels.split(","))
    if len(lengths) != args.branches:
        raise ValueError(
            f"--kernels lists {len(lengths)} lengths but --branches is {args.branches}"
        )
    return lengths


def _config_from_dataset(dataset, args):
    return EncoderConfig(
        n_channels=dataset.n_channels,
        n_samples=dataset.n_samples,
        sample_rate=dataset.sample_rate,
        n_branches=args.branches,
        kernel_lengths=_parse_kernels(args),
        kernels_per_branch=args.kernels_per_branch,
    )


def _splits(dataset, args, plan):
    if args.val is not None:
        return dataset, data_mod.load_erpd(args.val)
    min_val = 2 if plan.phase == "pretrain" else 1
    return training.split_subjects(dataset, plan.val_fraction, plan.seed, min_val=min_val)


def _cmd_synth(args):
    _require_out(args)
    _write_config(args)
    dataset = data_mod.synth_generate(
        n_subjects=args.subjects,
        trials_per_subject=args.trials,
        target_ratio=args.target_ratio,
        amplitude=(args.amplitude_min, args.amplitude_max),
        noise_scale=args.noise_scale,
        seed=args.seed,
        speller_layout=(args.rows, args.cols) if args.speller else None,
    )
    path = args.out / "dataset.erpd"
    data_mod.save_erpd(dataset, path)
    print(f"wrote {len(dataset.trials)} trials for {args.subjects} subjects to {path}")
    return 0


def _cmd_pretrain(args):
    _require_out(args)
    plan = training.TrainPlan(
        phase="pretrain",
        max_epochs=args.epochs,
        patience=args.patience,
        val_fraction=args.val_fraction,
        seed=args.seed,
        lr=args.lr,
        weight_decay=args.weight_decay,
        n_avg=args.n_avg,
        n_neg=args.n_neg,
        temperature=args.temperature,
    )
    _write_config(args, _plan_overrides(plan))
    dataset = data_mod.load_erpd(args.data)
    train_ds, val_ds = _splits(dataset, args, plan)
    config = _config_from_dataset(dataset, args)
    params, history = training.pretrain_contrastive(train_ds, val_ds, config, plan)
    (args.out / "metrics.csv").write_text(training.history_csv(history))
    save_checkpoint(params, args.out / "model.erpw")
    best = min(h.val_metric for h in history) if history else float("nan")
    print(f"pretrained {len(history)} epochs; best validation loss {best:.4f}")
    print(f"checkpoint: {args.out / 'model.erpw'}")
    return 0


def _cmd_train(args):
    if args.encoder is None:
        print("error: --encoder checkpoint is required for classifier training", file=sys.stderr)
        return 1
    _require_out(args)
    plan = training.TrainPlan(
        phase="classifier",
        max_epochs=args.epochs,
        patience=args.patience,
        val_fraction=args.val_fraction,
        seed=args.seed,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
    )
    _write_config(args, _plan_overrides(plan))
    params = load_checkpoint(args.encoder)
    dataset = data_mod.load_erpd(args.data)
    if (dataset.n_channels, dataset.n_samples) != (
        params.config.n_channels,
        params.config.n_samples,
    ):
        raise ShapeError(
            f"dataset {dataset.n_channels}x{dataset.n_samples} does not match encoder "
            f"config {params.config.n_channels}x{params.config.n_samples}"
        )
    train_ds, val_ds = _splits(dataset, args, plan)
    params, history = training.train_classifier(params, train_ds, val_ds, plan)
    (args.out / "metrics.csv").write_text(training.history_csv(history))
    save_checkpoint(params, args.out / "model.erpw")
    best = max(h.val_metric for h in history) if history else float("nan")
    print(f"trained {len(history)} epochs; best validation AUC {best:.4f}")
    print(f"checkpoint: {args.out / 'model.erpw'}")
    return 0


def _cmd_eval(args):
    _require_out(args)
    _write_config(args)
    params = load_checkpoint(args.checkpoint)
    dataset = data_mod.load_erpd(args.data)
    fingerprint = evaluation.config_fingerprint(_resolved_config(args))
    report = evaluation.evaluate(
        params, dataset, layout=(args.rows, args.cols), fingerprint=fingerprint
    )
    (args.out / "report.txt").write_text(report.to_text())
    (args.out / "report.csv").write_text(report.to_csv())
    print(report.to_text(), end="")
    return 0


def _cmd_crossval(args):
    _require_out(args)
    pre_for_config = training.TrainPlan(
        phase="pretrain", max_epochs=args.epochs, patience=args.patience,
        seed=args.seed, lr=args.lr, weight_decay=args.weight_decay,
    )
    _write_config(args, _plan_overrides(pre_for_config))
    dataset = data_mod.load_erpd(args.data)
    config = _config_from_dataset(dataset, args)
    pre = training.TrainPlan(
        phase="pretrain",
        max_epochs=args.epochs,
        patience=args.patience,
        val_fraction=args.val_fraction,
        seed=args.seed,
        lr=args.lr,
        weight_decay=args.weight_decay,
        n_avg=args.n_avg,
        n_neg=args.n_neg,
        temperature=args.temperature,
    )
    clf = training.TrainPlan(phase="classifier", max_epochs=args.epochs, patience=args.patience)
    reports = training.crossval(
        dataset,
        k=args.k,
        repeats=args.repeats,
        holdout_subjects=args.holdout,
        seed=args.seed,
        config=config,
        pretrain_plan=pre,
        classifier_plan=clf,
        jobs=args.jobs,
    )
    rows = ["run,subject_id,auc"]
    for i, rep in enumerate(reports):
        for sid in sorted(rep.per_subject_auc):
            rows.append(f"{i},{sid},{rep.per_subject_auc[sid]:.6f}")
    (args.out / "reports.csv").write_text("\n".join(rows) + "\n")
    summary = evaluation.aggregate_reports(reports)
    (args.out / "summary.txt").write_text(summary.to_text())
    print(summary.to_text(), end="")
    return 0


def _cmd_gradcheck(args):
    _write_config(args)
    results = gradcheck.run_all()
    print(gradcheck.format_table(results))
    worst = max(results.values())
    if worst >= gradcheck.TOLERANCE:
        print(f"FAILED: worst relative error {worst:.3e} >= {gradcheck.TOLERANCE}", file=sys.stderr)
        return 2
    print(f"all layers below {gradcheck.TOLERANCE}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "crossval": _cmd_crossval,
    "gradcheck": _cmd_gradcheck,
}


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # -h/--help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
