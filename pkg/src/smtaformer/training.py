"""Mini-batch training with binary cross-entropy, Adam and early stopping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import PatientRecord
from .errors import ConfigurationError, DimensionError, NumericError
from .metrics import rank_auc
from .model import LogisticConfig, ModelConfig, build_model

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 0.0
    seed: int = 0
    folds: int = 5
    eval_batch_size: int = 256
    # stop as soon as an epoch's mean training loss drops below this (memorization checks)
    target_loss: float | None = None

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.l2 < 0:
            raise ConfigurationError("l2 must be non-negative")
        if self.target_loss is not None and self.target_loss <= 0:
            raise ConfigurationError("target_loss must be positive")


@dataclass
class ArrayDataset:
    """Records stacked into dense arrays for batched forward passes."""

    ids: list[str]
    static: np.ndarray  # (N, m)
    channels: list[np.ndarray]  # each (N, t, d_i)
    labels: np.ndarray  # (N,)

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> "ArrayDataset":
        if not records:
            raise ConfigurationError("empty record set")
        n_ch = len(records[0].channels)
        return cls(
            ids=[r.stay_id for r in records],
            static=np.stack([r.static for r in records]),
            channels=[np.stack([r.channels[i] for r in records]) for i in range(n_ch)],
            labels=np.array([r.label for r in records], dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
        return self.static[idx], [c[idx] for c in self.channels], self.labels[idx]


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise DimensionError(f"bce_loss: {probs.shape} predictions for {labels.shape} labels")
    p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = labels * ad.log(p) + (1.0 - labels) * ad.log(1.0 - p)
    return -ad.mean(ll)


def bce_value(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update of every parameter, in place."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if config.l2 > 0:
            g = g + config.l2 * p.data
        grads[name] = g
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float | None] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_auc"])
            for i, (tl, vl, auc) in enumerate(zip(self.train_loss, self.val_loss, self.val_auc), 1):
                writer.writerow([i, repr(tl), repr(vl), "" if auc is None else repr(auc)])


def predict(model, data: ArrayDataset, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for lo in range(0, len(data), batch_size):
            static, channels, _ = data.take(slice(lo, lo + batch_size))
            out.append(model.forward_batch(static, channels).probs.data)
    return np.concatenate(out)


def train(
    model_config: ModelConfig | LogisticConfig,
    train_records: Sequence[PatientRecord] | ArrayDataset,
    val_records: Sequence[PatientRecord] | ArrayDataset,
    config: TrainConfig = TrainConfig(),
):
    """Fit a fresh model; returns ``(model, history)`` with the best-validation-epoch parameters restored.

    Training stops once validation loss has failed to improve for
    ``config.patience`` consecutive epochs, at ``config.max_epochs``, or when
    the epoch's training loss falls below ``config.target_loss`` if set.
    """
    config.validate()
    train_data = train_records if isinstance(train_records, ArrayDataset) else ArrayDataset.from_records(train_records)
    val_data = val_records if isinstance(val_records, ArrayDataset) else ArrayDataset.from_records(val_records)
    model = build_model(model_config)
    params = model.named_parameters()
    state = AdamState()
    history = TrainHistory()
    best_loss = math.inf
    best_params = {k: p.data.copy() for k, p in params.items()}
    stale = 0
    n = len(train_data)
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            static, channels, labels = train_data.take(idx)
            for p in params.values():
                p.zero_grad()
            loss = bce_loss(model.forward_batch(static, channels).probs, labels)
            ad.backward(loss)
            adam_step(params, state, config)
            total += loss.item() * len(idx)
        val_probs = predict(model, val_data, config.eval_batch_size)
        val_loss = bce_value(val_probs, val_data.labels)
        history.train_loss.append(total / n)
        history.val_loss.append(val_loss)
        history.val_auc.append(rank_auc(val_probs, val_data.labels))
        history.stopped_epoch = epoch
        logger.debug("epoch %d train %.5f val %.5f", epoch, total / n, val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
        if config.target_loss is not None and total / n < config.target_loss:
            break
    for k, p in params.items():
        p.data[...] = best_params[k]
    return model, history
