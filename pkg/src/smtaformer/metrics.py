"""Classification metrics: thresholded confusion counts and ROC AUC."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError


def tied_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_auc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mann-Whitney AUC (ties count one half). ``None`` when only one class is present."""
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(labels):
        raise DimensionError(f"{len(scores)} scores for {len(labels)} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = tied_ranks(scores)
    u = r[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) points sweeping the threshold from +inf down through each distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    fpr, tpr = [0.0], [0.0]
    tp = fp = 0
    for s in sorted(set(scores.tolist()), reverse=True):
        hit = scores == s
        tp += int(labels[hit].sum())
        fp += int((1 - labels[hit]).sum())
        tpr.append(tp / n_pos)
        fpr.append(fp / n_neg)
    return np.array(fpr), np.array(tpr)


def trapezoid_auc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    labels = np.asarray(labels).astype(int)
    if labels.sum() == 0 or labels.sum() == len(labels):
        return None
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    auc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = 0.5
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> Metrics:
    """Accuracy/precision/recall at ``score >= threshold`` plus rank AUC.

    Zero predicted positives gives precision 0 and the flag
    ``"precision_undefined"``; no actual positives likewise for recall.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.shape} scores for {labels.shape} labels")
    pred = scores >= threshold
    actual = labels == 1
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    tn = int(np.sum(~pred & ~actual))
    fn = int(np.sum(~pred & actual))
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision_undefined")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall_undefined")
    else:
        recall = tp / (tp + fn)
    auc = rank_auc(scores, labels)
    if auc is None:
        flags.append("auc_undefined")
    total = len(labels)
    accuracy = (tp + tn) / total if total else 0.0
    return Metrics(accuracy, precision, recall, auc, tp, fp, tn, fn, threshold, flags)


METRIC_COLUMNS = ("accuracy", "precision", "recall", "auc")


def summarize(folds: Sequence[Metrics]) -> dict[str, dict[str, float | None]]:
    """Mean and population std of each headline metric across folds (undefined AUCs skipped)."""
    out = {}
    for col in METRIC_COLUMNS:
        values = [getattr(m, col) for m in folds if getattr(m, col) is not None]
        if values:
            mean = math.fsum(values) / len(values)
            std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / len(values))
        else:
            mean = std = None
        out[col] = {"mean": mean, "std": std}
    return out
