"""Command-line entry point: ``smtaformer <command> [options]``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then command-line flags (flags win).  The resolved configuration is
written next to every command's outputs.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DataError, NumericError, SmtaformerError
from .experiment import (
    cross_validate,
    export_attention,
    logistic_config_for,
    metrics_document,
    toy_grad_check,
    model_config_for,
    run_sweep,
    sweep_arms,
    write_attention,
    write_cv_report,
    write_sweep,
)
from .metrics import compute_metrics
from .model import FUSIONS, ModelConfig, SMTAFormer, load_checkpoint, save_checkpoint
from .pipeline import load_dataset, preprocess
from .synth import SynthConfig, generate, oracle_auc, write_cohort
from .training import ArrayDataset, TrainConfig, bce_loss, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "synth": {k: v for k, v in asdict(SynthConfig()).items() if k != "seed"},
    "preprocess": {"steps": 24, "test_fraction": 0.1, "folds": 5, "horizon_days": 30},
    "model": {
        "kind": "smtaformer",
        "d": 64,
        "heads": 4,
        "layers": 2,
        "d_ff": None,
        "head_hidden": 32,
        "fusion": "dsaf",
        "share_channel_encoders": True,
        "positional_encoding": True,
    },
    # the fold count belongs to the dataset (preprocess.folds), not to training
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k not in ("seed", "folds")},
}

# flag dest -> (section, key)
FLAG_MAP = {
    "n_records": ("synth", "n_records"),
    "positive_rate": ("synth", "positive_rate"),
    "signal": ("synth", "signal"),
    "noise": ("synth", "noise"),
    "missingness": ("synth", "missingness"),
    "steps": ("preprocess", "steps"),
    "test_fraction": ("preprocess", "test_fraction"),
    "folds": ("preprocess", "folds"),
    "model_kind": ("model", "kind"),
    "fusion": ("model", "fusion"),
    "encoder_layers": ("model", "layers"),
    "d_model": ("model", "d"),
    "heads": ("model", "heads"),
    "d_ff": ("model", "d_ff"),
    "head_hidden": ("model", "head_hidden"),
    "separate_encoders": ("model", "share_channel_encoders"),
    "no_positional_encoding": ("model", "positional_encoding"),
    "lr": ("train", "lr"),
    "batch_size": ("train", "batch_size"),
    "epochs": ("train", "max_epochs"),
    "patience": ("train", "patience"),
    "l2": ("train", "l2"),
}
NEGATED = {"separate_encoders", "no_positional_encoding"}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {path}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {path}{key} must be an object")
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value
    return base


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    for dest, (section, key) in FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None or (dest in NEGATED and value is False):
            continue
        cfg[section][key] = (not value) if dest in NEGATED else value
    return cfg


def _echo(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _train_config(cfg: dict, dataset=None) -> TrainConfig:
    folds = len(dataset.folds) if dataset is not None else cfg["preprocess"]["folds"]
    try:
        tc = TrainConfig(seed=cfg["seed"], folds=folds, **cfg["train"])
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    tc.validate()
    return tc


def _model_config(cfg: dict, dataset):
    m = dict(cfg["model"])
    kind = m.pop("kind")
    if kind == "logistic":
        return logistic_config_for(dataset, seed=cfg["seed"])
    if kind != "smtaformer":
        raise ConfigurationError(f"unknown model kind {kind!r}")
    try:
        config = model_config_for(dataset, seed=cfg["seed"], **m)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    config.validate()
    return config


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigurationError("--out is required for this command")
    return Path(args.out)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    out = _require_out(args)
    try:
        synth = SynthConfig(seed=cfg["seed"], **cfg["synth"])
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    synth.validate()
    stays, truth = generate(synth, jobs=cfg["jobs"])
    try:
        write_cohort(stays, truth, out)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    _echo(cfg, out)
    print(f"wrote {len(stays)} stays ({sum(truth.labels)} positive) to {out}; oracle AUC {oracle_auc(truth):.4f}")
    return EXIT_OK


def cmd_preprocess(args, cfg) -> int:
    out = _require_out(args)
    if not Path(args.input).exists():
        raise DataError(f"input file {args.input} does not exist")
    p = cfg["preprocess"]
    manifest = preprocess(
        args.input, out, steps=p["steps"], test_fraction=p["test_fraction"], folds=p["folds"],
        seed=cfg["seed"], horizon_days=p["horizon_days"],
    )
    _echo(cfg, out)
    c = manifest["counts"]
    print(f"{c['retained']}/{c['input']} stays retained; train {c['train']} test {c['test']}; folds {c['fold_sizes']}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    out = _require_out(args)
    dataset = load_dataset(args.data)
    folds = dataset.folds
    if not 0 <= args.val_fold < len(folds):
        raise ConfigurationError(f"--val-fold must be in [0, {len(folds) - 1}]")
    train_records = [r for i, f in enumerate(folds) if i != args.val_fold for r in f]
    model_cfg = _model_config(cfg, dataset)
    tc = _train_config(cfg, dataset)
    model, history = train(model_cfg, train_records, folds[args.val_fold], tc)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.json")
    history.write_csv(out / "history.csv")
    test = ArrayDataset.from_records(dataset.test)
    metrics = compute_metrics(predict(model, test, tc.eval_batch_size), test.labels)
    (out / "test_metrics.json").write_text(json.dumps(metrics_document(metrics), indent=1, sort_keys=True) + "\n")
    _echo(cfg, out)
    print(f"best epoch {history.best_epoch}, stopped {history.stopped_epoch}; test AUC {metrics.auc}")
    return EXIT_OK


def cmd_cross_validate(args, cfg) -> int:
    out = _require_out(args)
    dataset = load_dataset(args.data)
    report = cross_validate(dataset, _model_config(cfg, dataset), _train_config(cfg, dataset), jobs=cfg["jobs"])
    write_cv_report(report, out)
    _echo(cfg, out)
    print((out / "cv_report.txt").read_text(), end="")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    out = _require_out(args)
    dataset = load_dataset(args.data)
    base = _model_config(cfg, dataset)
    if not isinstance(base, ModelConfig):
        raise ConfigurationError("the sweep varies SMTAFormer fusion and depth; use --model smtaformer")
    arms = sweep_arms(args.fusions, args.layers, default_layers=base.layers, grid=args.grid)
    sweep = run_sweep(dataset, base, _train_config(cfg, dataset), arms, jobs=cfg["jobs"])
    write_sweep(sweep, out, default_layers=base.layers)
    _echo(cfg, out)
    print((out / "sweep_report.txt").read_text(), end="")
    return EXIT_OK


def _split_records(dataset, split: str):
    if split == "test":
        return dataset.test
    if split == "train":
        return dataset.train
    return dataset.train + dataset.test


def cmd_eval(args, cfg) -> int:
    out = _require_out(args)
    dataset = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    data = ArrayDataset.from_records(_split_records(dataset, args.split))
    metrics = compute_metrics(predict(model, data), data.labels)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics_document(metrics), indent=1, sort_keys=True) + "\n")
    print(json.dumps(metrics_document(metrics), sort_keys=True))
    return EXIT_OK


def cmd_export_attention(args, cfg) -> int:
    out = _require_out(args)
    dataset = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    export = export_attention(model, _split_records(dataset, args.split))
    write_attention(export, out)
    summary = export.summary()
    print(f"{export.n_records} positive records; temporal mean {summary['temporal_mean']:.8f}; "
          f"above mean: {', '.join(summary['above_temporal_mean'])}")
    return EXIT_OK


def cmd_grad_check(args, cfg) -> int:
    errors, dead = toy_grad_check(cfg["seed"], cfg["model"]["fusion"])
    worst = max(errors, key=errors.get)
    report = {"max_relative_error": errors[worst], "worst_parameter": worst, "tolerance": args.tolerance,
              "per_parameter": errors, "zero_gradient": dead,
              "passed": errors[worst] < args.tolerance and not dead}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grad_check.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"max relative error {errors[worst]:.3e} ({worst}); tolerance {args.tolerance:g}")
    if dead:
        print(f"zero analytic gradient (check is vacuous) for: {', '.join(dead)}")
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, help="single source of all randomness")
    p.add_argument("--jobs", type=int, help="parallel cross-validation folds")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", dest="model_kind", choices=("smtaformer", "logistic"))
    g.add_argument("--fusion", choices=FUSIONS)
    g.add_argument("--encoder-layers", type=int)
    g.add_argument("--d-model", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--d-ff", type=int)
    g.add_argument("--head-hidden", type=int)
    g.add_argument("--separate-encoders", action="store_true", help="one encoder stack per channel")
    g.add_argument("--no-positional-encoding", action="store_true")
    t = p.add_argument_group("training")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--l2", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="smtaformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n-records", type=int)
    p.add_argument("--positive-rate", type=float)
    p.add_argument("--signal", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--missingness", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", parents=[common], help="raw stays -> dataset directory")
    p.add_argument("--input", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--folds", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train one model and save a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--val-fold", type=int, default=0)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cross-validate", parents=[common], help="k-fold cross-validation report")
    p.add_argument("--data", required=True)
    _model_flags(p)
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("sweep", parents=[common], help="fusion x encoder-depth ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--fusions", nargs="+", choices=FUSIONS, default=list(FUSIONS))
    p.add_argument("--layers", nargs="+", type=int, default=[1, 2, 3])
    p.add_argument("--grid", action="store_true", help="full cross product instead of the two one-way sweeps")
    _model_flags(p)
    p.set_defaults(func=cmd_sweep)

    for name, func, help_ in (
        ("eval", cmd_eval, "score a checkpoint"),
        ("export-attention", cmd_export_attention, "average inter-fusion attention over positive records"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("train", "test", "all"), default="test" if name == "eval" else "all")
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the toy model")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--fusion", choices=FUSIONS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SmtaformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
