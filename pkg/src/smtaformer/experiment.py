"""Cross-validation, ablation sweeps, attention export and report writers."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .cohort import PatientRecord
from .errors import ConfigurationError, DataError
from .metrics import METRIC_COLUMNS, Metrics, compute_metrics, summarize
from .model import LogisticConfig, ModelConfig, SMTAFormer
from .pipeline import Dataset
from .training import ArrayDataset, TrainConfig, TrainHistory, bce_loss, predict, train

COLUMN_TITLES = {"accuracy": "ACC", "precision": "Precision", "recall": "Recall", "auc": "AUC"}


def model_config_for(dataset: Dataset, **overrides) -> ModelConfig:
    m = dataset.manifest
    base = dict(
        static_dim=m["static_dim"],
        channel_dims=tuple(m["channel_dims"]),
        steps=m["steps"],
        channel_names=tuple(m["channel_names"]),
    )
    base.update(overrides)
    return ModelConfig(**base)


def logistic_config_for(dataset: Dataset, seed: int = 0) -> LogisticConfig:
    m = dataset.manifest
    return LogisticConfig(m["static_dim"], tuple(m["channel_dims"]), m["steps"], tuple(m["channel_names"]), seed)


@dataclass
class FoldResult:
    fold: int
    test: Metrics
    validation: Metrics
    history: TrainHistory


def _run_fold(args) -> FoldResult:
    fold, model_config, train_config, train_records, val_records, test_records = args
    model, history = train(model_config, train_records, val_records, train_config)
    test_data = ArrayDataset.from_records(test_records)
    val_data = ArrayDataset.from_records(val_records)
    test = compute_metrics(predict(model, test_data, train_config.eval_batch_size), test_data.labels)
    val = compute_metrics(predict(model, val_data, train_config.eval_batch_size), val_data.labels)
    return FoldResult(fold, test, val, history)


def cross_validate(
    dataset: Dataset,
    model_config: ModelConfig | LogisticConfig,
    train_config: TrainConfig = TrainConfig(),
    jobs: int = 1,
) -> dict:
    """One model per fold: fold ``i`` monitors early stopping, the rest train; all score the fixed test split.

    Seeds for fold ``i`` are derived from the configured seeds so results do
    not depend on ``jobs``.
    """
    folds = dataset.folds
    if len(folds) != train_config.folds:
        raise ConfigurationError(f"dataset has {len(folds)} folds but train config asks for {train_config.folds}")
    test = dataset.test
    tasks = []
    for i in range(len(folds)):
        train_records = [r for j, f in enumerate(folds) if j != i for r in f]
        fold_model = replace(model_config, seed=model_config.seed * 1000 + i)
        fold_train = replace(train_config, seed=train_config.seed * 1000 + i)
        tasks.append((i, fold_model, fold_train, train_records, folds[i], test))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    return cv_report(results, model_config, train_config)


def _config_label(config: ModelConfig | LogisticConfig) -> str:
    if isinstance(config, LogisticConfig):
        return "LR"
    return f"{config.fusion.upper()} L={config.layers}"


def cv_report(results: Sequence[FoldResult], model_config, train_config: TrainConfig) -> dict:
    tests = [r.test for r in results]
    return {
        "method": _config_label(model_config),
        "model_config": model_config.to_dict(),
        "train_config": vars(train_config).copy(),
        "folds": [
            {
                "fold": r.fold,
                "test": r.test.to_dict(),
                "validation": r.validation.to_dict(),
                "best_epoch": r.history.best_epoch,
                "stopped_epoch": r.history.stopped_epoch,
                "history": r.history.to_dict(),
            }
            for r in results
        ],
        "cv_mean": {k: v["mean"] for k, v in summarize(tests).items()},
        "cv_std": {k: v["std"] for k, v in summarize(tests).items()},
        # the fold-0 model scored on the same test split, for single-split comparisons
        "single_split": {k: getattr(tests[0], k) for k in METRIC_COLUMNS},
    }


def _fmt(x) -> str:
    return "   n/a" if x is None else f"{x:.3f}"


def format_table(rows: Sequence[tuple[str, dict]], first_header: str = "Method") -> str:
    width = max([len(first_header)] + [len(label) for label, _ in rows]) + 2
    header = first_header.ljust(width) + "".join(COLUMN_TITLES[c].rjust(11) for c in METRIC_COLUMNS)
    lines = [header, "-" * len(header)]
    for label, values in rows:
        lines.append(label.ljust(width) + "".join(_fmt(values.get(c)).rjust(11) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def cv_text(report: dict) -> str:
    rows = [(f"fold {f['fold']}", f["test"]) for f in report["folds"]]
    rows.append(("mean", report["cv_mean"]))
    rows.append(("std", report["cv_std"]))
    rows.append(("single split", report["single_split"]))
    return f"{report['method']} (test split)\n" + format_table(rows, "Fold")


def write_cv_report(report: dict, out_dir: str | Path, stem: str = "cv_report") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out / f"{stem}.txt").write_text(cv_text(report))
    for f in report["folds"]:
        TrainHistory(**f["history"]).write_csv(out / f"{stem}_fold{f['fold']}_history.csv")


# ----------------------------------------------------------------------------
# ablation sweep
# ----------------------------------------------------------------------------


def sweep_arms(fusions: Sequence[str], layers: Sequence[int], default_layers: int = 2, grid: bool = False):
    """(fusion, layers) pairs: the fusion comparison at ``default_layers`` plus the depth sweep for DSAF."""
    if grid:
        return [(f, n) for f in fusions for n in layers]
    arms = [(f, default_layers) for f in fusions]
    arms += [("dsaf", n) for n in layers if ("dsaf", n) not in arms]
    return arms


def run_sweep(dataset: Dataset, base: ModelConfig, train_config: TrainConfig, arms, jobs: int = 1) -> dict:
    reports = {}
    for fusion, n_layers in arms:
        cfg = replace(base, fusion=fusion, layers=n_layers)
        reports[f"{fusion}-L{n_layers}"] = cross_validate(dataset, cfg, train_config, jobs)
    return {"arms": [list(a) for a in arms], "reports": reports}


def sweep_text(sweep: dict, default_layers: int = 2) -> str:
    reports = sweep["reports"]
    fusion_rows = []
    for key, rep in reports.items():
        cfg = rep["model_config"]
        if cfg["layers"] == default_layers:
            label = {"concat": "DNN  Encoder  -", "saf": "DNN  Encoder  SAF", "dsaf": "DNN  Encoder  DSAF"}[cfg["fusion"]]
            fusion_rows.append((label, rep["cv_mean"]))
    depth_rows = [
        (str(rep["model_config"]["layers"]), rep["cv_mean"])
        for rep in sorted(reports.values(), key=lambda r: r["model_config"]["layers"])
        if rep["model_config"]["fusion"] == "dsaf"
    ]
    out = [f"Fusion strategies (encoder layers = {default_layers}, CV mean on test split)"]
    out.append(format_table(fusion_rows, "Static  Temporal  Fusion"))
    out.append("Encoder depth (DSAF, CV mean on test split)")
    out.append(format_table(depth_rows, "Encoder layers"))
    return "\n".join(out)


def write_sweep(sweep: dict, out_dir: str | Path, default_layers: int = 2) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_report.json").write_text(json.dumps(sweep, indent=1, sort_keys=True) + "\n")
    (out / "sweep_report.txt").write_text(sweep_text(sweep, default_layers))


# ----------------------------------------------------------------------------
# attention export
# ----------------------------------------------------------------------------


@dataclass
class AttentionExport:
    keys: list[str]  # "static" then the channel names
    weights: np.ndarray  # (heads, n + 1), averaged over positive records
    n_records: int

    @property
    def static_mean(self) -> float:
        return float(self.weights[:, 0].mean())

    @property
    def temporal_mean(self) -> float:
        return float(self.weights[:, 1:].mean())

    def per_feature(self) -> dict[str, float]:
        return {k: float(v) for k, v in zip(self.keys, self.weights.mean(axis=0))}

    def summary(self) -> dict:
        feats = self.per_feature()
        t_mean = self.temporal_mean
        return {
            "n_records": self.n_records,
            "heads": int(self.weights.shape[0]),
            "static_mean": self.static_mean,
            "temporal_mean": t_mean,
            "per_feature": feats,
            "above_temporal_mean": [k for k in self.keys[1:] if feats[k] > t_mean],
        }


def export_attention(model: SMTAFormer, records: Sequence[PatientRecord], batch_size: int = 256) -> AttentionExport:
    """Average each head's inter-fusion weight row over the label-1 records."""
    if not isinstance(model, SMTAFormer) or model.inter is None:
        raise ConfigurationError("attention export needs a model with an inter static/temporal fusion stage")
    positives = [r for r in records if r.label == 1]
    if not positives:
        raise DataError("no positive records to export attention for")
    data = ArrayDataset.from_records(positives)
    total = None
    with ad.no_grad():
        for lo in range(0, len(data), batch_size):
            static, channels, _ = data.take(slice(lo, lo + batch_size))
            w = model.forward_batch(static, channels).inter_weights.data[:, :, 0, :]  # (B, h, n+1)
            s = w.sum(axis=0)
            total = s if total is None else total + s
    keys = ["static", *model.config.channel_names]
    return AttentionExport(keys, total / len(data), len(data))


def write_attention(export: AttentionExport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "attention.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["head", "key", "weight"])
        for h in range(export.weights.shape[0]):
            for k, key in enumerate(export.keys):
                writer.writerow([h, key, repr(float(export.weights[h, k]))])
    (out / "attention_summary.json").write_text(json.dumps(export.summary(), indent=1, sort_keys=True) + "\n")


def metrics_document(metrics: Metrics) -> dict:
    doc = metrics.to_dict()
    for k, v in list(doc.items()):
        if isinstance(v, float) and not math.isfinite(v):
            doc[k] = None
    return doc


def toy_grad_check(seed: int = 0, fusion: str = "dsaf", eps: float = 1e-5) -> tuple[dict[str, float], list[str]]:
    """Finite-difference check of BCE on a 2-record toy SMTAFormer (n=2, t=2, d=4, h=1, L=1).

    Returns per-parameter max relative errors and the parameters whose
    analytic gradient is identically zero (for which the check proves nothing).
    """
    rng = np.random.default_rng([seed, 7])
    config = ModelConfig(static_dim=5, channel_dims=(1, 3), steps=2, d=4, heads=1, layers=1,
                         head_hidden=8, fusion=fusion, seed=seed)
    model = SMTAFormer(config)
    static = rng.normal(size=(2, 5))
    channels = [rng.normal(size=(2, 2, 1)), rng.normal(size=(2, 2, 3))]
    labels = np.array([1.0, 0.0])
    params = model.named_parameters()

    def loss():
        return bce_loss(model.forward_batch(static, channels).probs, labels)

    ad.backward(loss())
    dead = [k for k, p in params.items() if p.grad is None or not np.any(p.grad)]
    return ad.gradient_errors(loss, params, eps), dead
