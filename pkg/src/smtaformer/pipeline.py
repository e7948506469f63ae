"""Raw stays file -> dataset directory.

The dataset directory holds::

    records.jsonl     one processed PatientRecord per line
    normalizer.json   fitted z-score statistics, vocabularies and fallbacks
    manifest.json     split membership, fold membership, seed, counts, exclusions
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .cohort import (
    CohortRules,
    NormalizerState,
    PatientRecord,
    apply_normalizer,
    filter_cohort,
    fit_normalizer,
    kfold,
    read_stays,
    split_dataset,
    to_hourly,
)
from .errors import SchemaError

RECORDS_FILE = "records.jsonl"
NORMALIZER_FILE = "normalizer.json"
MANIFEST_FILE = "manifest.json"


def _dump(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def preprocess(
    stays_path: str | Path,
    out_dir: str | Path,
    *,
    steps: int = 24,
    test_fraction: float = 0.1,
    folds: int = 5,
    seed: int = 0,
    horizon_days: float = 30,
    rules: CohortRules = CohortRules(),
) -> dict:
    """filter -> label -> aggregate -> split -> fit on train -> apply -> write. Returns the manifest."""
    stays = read_stays(stays_path)
    kept, excluded = filter_cohort(stays, rules)
    hourly = [to_hourly(s, steps, horizon_days) for s in kept]
    labels = [h.label for h in hourly]
    train_idx, test_idx = split_dataset(labels, test_fraction, seed)
    fold_idx = kfold([labels[i] for i in train_idx], folds, seed)
    state = fit_normalizer([hourly[i] for i in train_idx])
    unseen: Counter = Counter()
    train_set = set(train_idx)
    records = []
    for i, h in enumerate(hourly):
        # unseen-category counts are only meaningful outside the training split
        records.append(apply_normalizer(state, h, unseen if i not in train_set else None))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / RECORDS_FILE, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")
    _dump(state.to_json(), out / NORMALIZER_FILE)
    ids = [h.stay_id for h in hourly]
    manifest = {
        "seed": seed,
        "steps": steps,
        "test_fraction": test_fraction,
        "folds_k": folds,
        "horizon_days": horizon_days,
        "train": [ids[i] for i in train_idx],
        "test": [ids[i] for i in test_idx],
        "folds": [[ids[train_idx[j]] for j in fold] for fold in fold_idx],
        "channel_names": state.channels,
        "channel_dims": state.channel_dims,
        "static_dim": state.static_dim,
        "counts": {
            "input": len(stays),
            "retained": len(kept),
            "positive": int(sum(labels)),
            "train": len(train_idx),
            "test": len(test_idx),
            "test_positive": int(sum(labels[i] for i in test_idx)),
            "fold_sizes": [len(f) for f in fold_idx],
            "fold_positive": [int(sum(labels[train_idx[j]] for j in f)) for f in fold_idx],
        },
        "exclusions": excluded,
        "dropped_variables": state.dropped,
        "unseen_categories": dict(sorted(unseen.items())),
    }
    _dump(manifest, out / MANIFEST_FILE)
    return manifest


@dataclass
class Dataset:
    records: dict[str, PatientRecord]
    manifest: dict
    normalizer: NormalizerState

    def subset(self, ids) -> list[PatientRecord]:
        return [self.records[i] for i in ids]

    @property
    def train(self) -> list[PatientRecord]:
        return self.subset(self.manifest["train"])

    @property
    def test(self) -> list[PatientRecord]:
        return self.subset(self.manifest["test"])

    @property
    def folds(self) -> list[list[PatientRecord]]:
        return [self.subset(f) for f in self.manifest["folds"]]


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    for name in (RECORDS_FILE, NORMALIZER_FILE, MANIFEST_FILE):
        if not (path / name).exists():
            raise SchemaError(f"dataset directory {path} is missing {name}")
    records = {}
    with open(path / RECORDS_FILE) as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                r = PatientRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise SchemaError(f"{path / RECORDS_FILE}:{lineno}: {exc!r}") from exc
            records[r.stay_id] = r
    manifest = json.loads((path / MANIFEST_FILE).read_text())
    normalizer = NormalizerState.from_json(json.loads((path / NORMALIZER_FILE).read_text()))
    return Dataset(records, manifest, normalizer)
