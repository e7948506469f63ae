"""Raw ICU stays -> model-ready records.

Stages: cohort filtering, 30-day labelling, hourly aggregation over a window
ending at ICU discharge, forward/backward filling, z-score / one-hot
normalisation fitted on the training split, and stratified splitting.

Raw stays are newline-delimited JSON, one object per line::

    {"stay_id": "s0001",
     "static": {"age": 64.0, "sex": "F", "insurance": "Medicare", "ethnicity": "WHITE"},
     "start": "2150-01-01T00:00:00", "end": "2150-01-02T06:00:00",
     "next_admission": null, "death": null,
     "icd9_codes": ["4019"], "pregnancy": false,
     "temporal": {"HR": {"kind": "continuous", "events": [["2150-01-01T00:05:00", 80.0], ...]},
                  "Eye": {"kind": "discrete", "events": [...]}}}

Timestamps are ISO-8601.  A death at or before ``end`` means the patient
died in the ICU.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataIntegrityError, PipelineOrderError, SchemaError

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
DISCRETE = "discrete"
STATIC_CONTINUOUS = ("age",)
STATIC_CATEGORICAL = ("sex", "insurance", "ethnicity")
HOUR = timedelta(hours=1)


@dataclass
class TemporalVariable:
    kind: str
    events: list[tuple[datetime, float]]


@dataclass
class RawStay:
    stay_id: str
    static: dict
    start: datetime
    end: datetime
    temporal: dict[str, TemporalVariable]
    next_admission: datetime | None = None
    death: datetime | None = None
    icd9_codes: tuple[str, ...] = ()
    pregnancy: bool = False

    @property
    def hours(self) -> float:
        return (self.end - self.start) / HOUR

    @property
    def died_in_icu(self) -> bool:
        return self.death is not None and self.death <= self.end

    def to_json(self) -> dict:
        def ts(x):
            return None if x is None else x.isoformat()

        return {
            "stay_id": self.stay_id,
            "static": self.static,
            "start": ts(self.start),
            "end": ts(self.end),
            "next_admission": ts(self.next_admission),
            "death": ts(self.death),
            "icd9_codes": list(self.icd9_codes),
            "pregnancy": self.pregnancy,
            "temporal": {
                name: {"kind": var.kind, "events": [[t.isoformat(), v] for t, v in var.events]}
                for name, var in self.temporal.items()
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RawStay":
        def ts(x):
            return None if x is None else datetime.fromisoformat(x)

        try:
            temporal = {}
            for name, var in doc["temporal"].items():
                if var["kind"] not in (CONTINUOUS, DISCRETE):
                    raise SchemaError(f"variable {name}: unknown kind {var['kind']!r}")
                events = [(datetime.fromisoformat(t), float(v)) for t, v in var["events"]]
                temporal[name] = TemporalVariable(var["kind"], events)
            stay = cls(
                stay_id=str(doc["stay_id"]),
                static=dict(doc["static"]),
                start=datetime.fromisoformat(doc["start"]),
                end=datetime.fromisoformat(doc["end"]),
                temporal=temporal,
                next_admission=ts(doc.get("next_admission")),
                death=ts(doc.get("death")),
                icd9_codes=tuple(doc.get("icd9_codes", ())),
                pregnancy=bool(doc.get("pregnancy", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"malformed stay: {exc!r}") from exc
        missing = [k for k in ("age", *STATIC_CATEGORICAL) if k not in stay.static]
        if missing:
            raise SchemaError(f"stay {stay.stay_id}: static attributes missing {missing}")
        if stay.end <= stay.start:
            raise SchemaError(f"stay {stay.stay_id}: end is not after start")
        for name, var in stay.temporal.items():
            for t, _ in var.events:
                if not stay.start <= t <= stay.end:
                    raise SchemaError(f"stay {stay.stay_id}: {name} event at {t} outside the stay")
        return stay


def read_stays(path: str | Path) -> list[RawStay]:
    stays = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                stays.append(RawStay.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return stays


def write_stays(stays: Iterable[RawStay], path: str | Path) -> None:
    with open(path, "w") as fh:
        for stay in stays:
            fh.write(json.dumps(stay.to_json(), separators=(",", ":")) + "\n")


# ----------------------------------------------------------------------------
# cohort definition
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CohortRules:
    icd9_allowlist: frozenset = frozenset({"4010", "4011", "4019"})
    min_age: float = 18.0
    min_hours: float = 24.0
    max_hours: float = 72.0


EXCLUSION_RULES = ("diagnosis", "age", "died_in_icu", "pregnancy", "length_of_stay")


def _first_failed_rule(stay: RawStay, rules: CohortRules) -> str | None:
    if not rules.icd9_allowlist.intersection(stay.icd9_codes):
        return "diagnosis"
    if float(stay.static["age"]) < rules.min_age:
        return "age"
    if stay.died_in_icu:
        return "died_in_icu"
    if stay.pregnancy:
        return "pregnancy"
    if not rules.min_hours < stay.hours < rules.max_hours:
        return "length_of_stay"
    return None


def filter_cohort(stays: Sequence[RawStay], rules: CohortRules = CohortRules()) -> tuple[list[RawStay], dict[str, int]]:
    """Keep stays passing every rule; each excluded stay is counted under the first rule it fails."""
    kept = []
    excluded = {rule: 0 for rule in EXCLUSION_RULES}
    for stay in stays:
        failed = _first_failed_rule(stay, rules)
        if failed is None:
            kept.append(stay)
        else:
            excluded[failed] += 1
    if not kept:
        logger.warning("cohort filter removed all %d stays", len(stays))
    return kept, excluded


def label_stay(stay: RawStay, horizon_days: float = 30) -> int:
    """1 if the patient is readmitted to the ICU or dies within the horizon after discharge."""
    horizon = timedelta(days=horizon_days)
    if stay.next_admission is not None:
        if stay.next_admission < stay.end:
            raise DataIntegrityError(f"stay {stay.stay_id}: next admission precedes discharge")
        if stay.next_admission - stay.end <= horizon:
            return 1
    if stay.death is not None and stay.death - stay.end <= horizon:
        return 1
    return 0


# ----------------------------------------------------------------------------
# hourly grid
# ----------------------------------------------------------------------------


def _mode(values: Sequence[float]) -> float:
    # ties go to the value observed most recently
    counts = Counter(values)
    best = max(counts.values())
    for v in reversed(values):
        if counts[v] == best:
            return v
    raise AssertionError("unreachable")


def aggregate_hourly(
    events: Sequence[tuple[datetime, float]], kind: str, end: datetime, steps: int
) -> list[float | None]:
    """Bin events into ``steps`` hourly cells ending at ``end``.

    Cell ``j`` covers ``[end - (steps - j) h, end - (steps - j - 1) h)``; the
    final cell also includes ``end``.  Continuous cells take the mean, discrete
    cells the mode; empty cells are ``None``.
    """
    if kind not in (CONTINUOUS, DISCRETE):
        raise ConfigurationError(f"unknown variable kind {kind!r}")
    start = end - steps * HOUR
    cells: list[list[float]] = [[] for _ in range(steps)]
    for t, v in sorted(events, key=lambda e: e[0]):
        if t < start or t > end:
            continue
        j = min(int((t - start) / HOUR), steps - 1)
        cells[j].append(v)
    out: list[float | None] = []
    for vals in cells:
        if not vals:
            out.append(None)
        elif kind == CONTINUOUS:
            out.append(math.fsum(vals) / len(vals))
        else:
            out.append(_mode(vals))
    return out


def fill_missing(series: Sequence[float | None], fallback: float | None = None) -> list[float]:
    """Forward-fill, then backward-fill leading gaps; all-missing series take ``fallback``."""
    out: list[float | None] = list(series)
    if all(v is None for v in out):
        if fallback is None:
            raise PipelineOrderError("series is entirely missing and no training fallback is available")
        return [float(fallback)] * len(out)
    last = None
    for i, v in enumerate(out):
        if v is None:
            out[i] = last
        else:
            last = v
    first = next(v for v in out if v is not None)
    return [first if v is None else float(v) for v in out]


@dataclass
class HourlyStay:
    """A labelled stay on the hourly grid, before imputation and normalisation."""

    stay_id: str
    static: dict
    series: dict[str, list[float | None]]
    kinds: dict[str, str]
    label: int


def to_hourly(stay: RawStay, steps: int = 24, horizon_days: float = 30) -> HourlyStay:
    series = {name: aggregate_hourly(var.events, var.kind, stay.end, steps) for name, var in stay.temporal.items()}
    kinds = {name: var.kind for name, var in stay.temporal.items()}
    return HourlyStay(stay.stay_id, dict(stay.static), series, kinds, label_stay(stay, horizon_days))


# ----------------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------------


@dataclass
class PatientRecord:
    stay_id: str
    static: np.ndarray  # (m,)
    channels: list[np.ndarray]  # each (t, d_i)
    label: int

    def to_json(self) -> dict:
        return {
            "stay_id": self.stay_id,
            "label": int(self.label),
            "static": self.static.tolist(),
            "channels": [c.tolist() for c in self.channels],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PatientRecord":
        return cls(
            stay_id=doc["stay_id"],
            static=np.asarray(doc["static"], dtype=np.float64),
            channels=[np.asarray(c, dtype=np.float64).reshape(len(c), -1) for c in doc["channels"]],
            label=int(doc["label"]),
        )


@dataclass
class NormalizerState:
    channels: list[str]  # retained temporal variables, in model order
    kinds: dict[str, str]
    means: dict[str, float]  # continuous temporal variables and static "age"
    stds: dict[str, float]
    vocab: dict[str, list]  # discrete temporal variables and static categoricals
    fallback: dict[str, float]
    static_continuous: list[str] = field(default_factory=list)
    dropped: list[dict] = field(default_factory=list)

    @property
    def channel_dims(self) -> list[int]:
        return [1 if self.kinds[c] == CONTINUOUS else len(self.vocab[c]) for c in self.channels]

    @property
    def static_dim(self) -> int:
        return len(self.static_continuous) + sum(len(self.vocab[k]) for k in STATIC_CATEGORICAL)

    def to_json(self) -> dict:
        return {
            "channels": self.channels,
            "kinds": self.kinds,
            "means": self.means,
            "stds": self.stds,
            "vocab": self.vocab,
            "fallback": self.fallback,
            "static_continuous": self.static_continuous,
            "dropped": self.dropped,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NormalizerState":
        return cls(**doc)


def _population_std(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def fit_normalizer(train: Sequence[HourlyStay]) -> NormalizerState:
    """Fit fallbacks, z-score statistics and vocabularies on training stays only."""
    if not train:
        raise ConfigurationError("cannot fit a normaliser on an empty training set")
    order = list(train[0].series)
    kinds = dict(train[0].kinds)
    channels, means, stds, vocab, fallback, dropped = [], {}, {}, {}, {}, []
    for name in order:
        observed = [v for s in train for v in s.series.get(name, ()) if v is not None]
        if not observed:
            dropped.append({"variable": name, "reason": "no training observations"})
            continue
        if kinds[name] == CONTINUOUS:
            fallback[name] = math.fsum(observed) / len(observed)
        else:
            counts = Counter(observed)
            fallback[name] = min(counts, key=lambda v: (-counts[v], v))
        filled = np.array([fill_missing(s.series[name], fallback[name]) for s in train], dtype=np.float64)
        if kinds[name] == CONTINUOUS:
            std = _population_std(filled)
            if std <= 0:
                dropped.append({"variable": name, "reason": "zero training variance"})
                continue
            means[name] = float(filled.mean())
            stds[name] = std
        else:
            vocab[name] = sorted(set(filled.ravel().tolist()))
        channels.append(name)
    static_continuous = []
    for name in STATIC_CONTINUOUS:
        values = np.array([float(s.static[name]) for s in train])
        std = _population_std(values)
        if std <= 0:
            dropped.append({"variable": name, "reason": "zero training variance"})
            continue
        means[name] = float(values.mean())
        stds[name] = std
        static_continuous.append(name)
    for name in STATIC_CATEGORICAL:
        vocab[name] = sorted({str(s.static[name]) for s in train})
    for entry in dropped:
        logger.info("dropping %s: %s", entry["variable"], entry["reason"])
    return NormalizerState(channels, {c: kinds[c] for c in channels}, means, stds, vocab, fallback, static_continuous, dropped)


def _one_hot(value, vocabulary: list) -> np.ndarray | None:
    row = np.zeros(len(vocabulary))
    try:
        row[vocabulary.index(value)] = 1.0
    except ValueError:
        return None
    return row


def apply_normalizer(state: NormalizerState, stay: HourlyStay, unseen: Counter | None = None) -> PatientRecord:
    """Impute, z-score and one-hot encode one stay. Unseen categories become all-zero rows."""
    parts = [np.array([(float(stay.static[n]) - state.means[n]) / state.stds[n]]) for n in state.static_continuous]
    for name in STATIC_CATEGORICAL:
        row = _one_hot(str(stay.static[name]), state.vocab[name])
        if row is None:
            row = np.zeros(len(state.vocab[name]))
            if unseen is not None:
                unseen[name] += 1
        parts.append(row)
    channels = []
    for name in state.channels:
        filled = np.array(fill_missing(stay.series[name], state.fallback[name]))
        if state.kinds[name] == CONTINUOUS:
            channels.append(((filled - state.means[name]) / state.stds[name])[:, None])
            continue
        vocabulary = state.vocab[name]
        grid = np.zeros((len(filled), len(vocabulary)))
        for j, v in enumerate(filled):
            row = _one_hot(v, vocabulary)
            if row is None:
                if unseen is not None:
                    unseen[name] += 1
            else:
                grid[j] = row
        channels.append(grid)
    return PatientRecord(stay.stay_id, np.concatenate(parts), channels, int(stay.label))


# ----------------------------------------------------------------------------
# splitting
# ----------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(labels: Sequence[int], test_fraction: float = 0.1, seed: int = 0) -> tuple[list[int], list[int]]:
    """Stratified shuffled split; returns (train indices, test indices)."""
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng([seed, 0])
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels != 1))
    n_test = _round_half_up(test_fraction * n)
    n_test_pos = min(len(pos), n_test, _round_half_up(n_test * len(pos) / n)) if n else 0
    n_test_neg = n_test - n_test_pos
    if n_test_neg > len(neg):
        n_test_neg = len(neg)
        n_test_pos = n_test - n_test_neg
    test = np.concatenate([pos[:n_test_pos], neg[:n_test_neg]])
    train = np.concatenate([pos[n_test_pos:], neg[n_test_neg:]])
    return rng.permutation(train).tolist(), rng.permutation(test).tolist()


def kfold(labels: Sequence[int], k: int = 5, seed: int = 0) -> list[list[int]]:
    """Stratified folds over ``range(len(labels))``; sizes and positive counts differ by at most one."""
    labels = np.asarray(labels, dtype=int)
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    if len(labels) < k:
        raise ConfigurationError(f"cannot make {k} folds from {len(labels)} records")
    rng = np.random.default_rng([seed, 1])
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == 1)), rng.permutation(np.flatnonzero(labels != 1))])
    return [sorted(order[i::k].tolist()) for i in range(k)]
