"""Synthetic ICU stays with a planted, tunable link between features and label.

Each stay gets static attributes, eight continuous vitals simulated as AR(1)
walks around patient-specific baselines, and four Glasgow-coma-scale
channels driven by a Markov chain.  A latent risk combines age, the mean
heart rate over the last hours before discharge, and the systolic pressure
trend over the observation window.  Labels are the top ``round(rho * N)``
records by ``signal * risk + noise * (1 - signal) * eps``, so the positive
count is exact.

The vital-sign means and spreads below are fixture constants chosen to look
plausible; they are not clinical reference values.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from functools import partial
from pathlib import Path

import numpy as np

from .cohort import CONTINUOUS, DISCRETE, RawStay, TemporalVariable, write_stays
from .errors import ConfigurationError
from .metrics import rank_auc

# name, baseline mean, between-patient sd, within-stay sd, AR coefficient
VITALS = (
    ("DBP", 65.0, 8.0, 5.0, 0.8),
    ("Glucose", 130.0, 25.0, 15.0, 0.7),
    ("HR", 85.0, 12.0, 6.0, 0.8),
    ("MBP", 0.0, 0.0, 0.0, 0.0),  # derived from SBP and DBP
    ("OS", 97.0, 1.5, 1.0, 0.6),
    ("RR", 18.0, 3.0, 2.0, 0.6),
    ("SBP", 125.0, 14.0, 7.0, 0.8),
    ("Temp", 37.0, 0.4, 0.2, 0.7),
)
GCS = (("Eye", 1, 4), ("Motor", 1, 6), ("Verbal", 1, 5))
CHANNELS = tuple(v[0] for v in VITALS) + ("Eye", "Motor", "Verbal", "Total")
SEXES = ("F", "M")
INSURANCE = (("Medicare", 0.55), ("Private", 0.25), ("Medicaid", 0.1), ("Government", 0.06), ("Self Pay", 0.04))
ETHNICITY = (("WHITE", 0.7), ("BLACK", 0.1), ("HISPANIC", 0.06), ("ASIAN", 0.04), ("OTHER", 0.1))
ICD9 = ("4010", "4011", "4019")
BASE_DATE = datetime(2150, 1, 1)
RISK_COEFFICIENTS = {"age": 1.0, "late_hr_mean": 0.8, "sbp_trend": -0.6}


@dataclass
class SynthConfig:
    n_records: int = 2000
    positive_rate: float = 0.111
    seed: int = 0
    signal: float = 0.8
    noise: float = 1.0
    missingness: float = 0.1
    window_hours: int = 24
    late_hours: int = 6

    def validate(self) -> None:
        if not 0 < self.positive_rate < 1:
            raise ConfigurationError(f"positive_rate must be in (0, 1), got {self.positive_rate}")
        n_pos = math.floor(self.positive_rate * self.n_records + 0.5)
        if self.positive_rate * self.n_records < 1 or n_pos >= self.n_records:
            raise ConfigurationError(
                f"{self.n_records} records at rate {self.positive_rate} cannot hold both classes"
            )
        if not 0 <= self.signal <= 1:
            raise ConfigurationError(f"signal must be in [0, 1], got {self.signal}")
        if not 0 <= self.missingness < 1:
            raise ConfigurationError(f"missingness must be in [0, 1), got {self.missingness}")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")

    @property
    def n_positive(self) -> int:
        return math.floor(self.positive_rate * self.n_records + 0.5)


@dataclass
class GroundTruth:
    stay_ids: list[str]
    risk: list[float]  # signal * standardised risk
    noise: list[float]  # noise * (1 - signal) * eps
    labels: list[int]
    threshold: float
    coefficients: dict = field(default_factory=lambda: dict(RISK_COEFFICIENTS))
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "GroundTruth":
        return cls(**doc)


def _choice(rng: np.random.Generator, table) -> str:
    names, probs = zip(*table)
    return names[rng.choice(len(names), p=np.array(probs) / sum(probs))]


def _ar1(rng, hours: int, mean: float, sd: float, phi: float) -> np.ndarray:
    x = np.empty(hours)
    x[0] = rng.normal(0.0, sd)
    innov = sd * math.sqrt(1 - phi * phi)
    for h in range(1, hours):
        x[h] = phi * x[h - 1] + rng.normal(0.0, innov)
    return mean + x


def _gcs_chain(rng, hours: int, lo: int, hi: int) -> np.ndarray:
    state = hi if rng.random() < 0.6 else int(rng.integers(lo, hi + 1))
    out = np.empty(hours, dtype=int)
    for h in range(hours):
        u = rng.random()
        if u < 0.08:
            state = max(lo, state - 1)
        elif u < 0.2:
            state = min(hi, state + 1)
        out[h] = state
    return out


def _sample_times(rng, start: datetime, end: datetime, hours: int, every: int, extra: float):
    """Charting times: one per ``every`` hours (plus occasional extras) inside the stay."""
    times = []
    for h in range(0, hours, every):
        offsets = [rng.uniform(0, every)]
        if rng.random() < extra:
            offsets.append(rng.uniform(0, every))
        for off in sorted(offsets):
            t = start + timedelta(seconds=round((h + off) * 3600))
            if t <= end:
                times.append((h, t))
    return times


def _simulate_stay(config: SynthConfig, index: int):
    rng = np.random.default_rng([config.seed, index])
    stay_id = f"s{index:06d}"
    age = round(float(np.clip(rng.normal(65, 14), 18, 90)), 1)
    static = {
        "age": age,
        "sex": SEXES[int(rng.integers(0, 2))],
        "insurance": _choice(rng, INSURANCE),
        "ethnicity": _choice(rng, ETHNICITY),
    }
    start = BASE_DATE + timedelta(seconds=round(rng.uniform(0, 3650 * 86400)))
    los_hours = rng.uniform(24.5, 71.5)
    end = start + timedelta(seconds=round(los_hours * 3600))
    hours = int(math.ceil((end - start) / timedelta(hours=1)))

    latent = {}
    for name, mean, between, within, phi in VITALS:
        if name == "MBP":
            continue
        latent[name] = _ar1(rng, hours, mean + rng.normal(0, between), within, phi)
    slope = rng.normal(0.0, 0.6)  # mmHg per hour
    ramp = slope * (np.arange(hours) - (hours - 1))
    latent["SBP"] = latent["SBP"] + ramp
    latent["DBP"] = latent["DBP"] + 0.5 * ramp
    latent["MBP"] = (latent["SBP"] + 2 * latent["DBP"]) / 3 + rng.normal(0, 1.0, hours)
    gcs = {name: _gcs_chain(rng, hours, lo, hi) for name, lo, hi in GCS}

    temporal = {}
    for name, *_ in VITALS:
        every, extra, meas_sd = (4, 0.1, 5.0) if name == "Glucose" else (1, 0.3, 0.02)
        events = []
        for h, t in _sample_times(rng, start, end, hours, every, extra):
            if rng.random() < config.missingness:
                continue
            value = latent[name][h] * (1 + rng.normal(0, meas_sd)) if name != "Glucose" else latent[name][h] + rng.normal(0, meas_sd)
            events.append((t, round(float(value), 2)))
        temporal[name] = TemporalVariable(CONTINUOUS, events)
    gcs_events = {name: [] for name in ("Eye", "Motor", "Verbal", "Total")}
    for h, t in _sample_times(rng, start, end, hours, 2, 0.2):
        if rng.random() < config.missingness:
            continue
        total = 0
        for name, _, _ in GCS:
            gcs_events[name].append((t, float(gcs[name][h])))
            total += int(gcs[name][h])
        gcs_events["Total"].append((t, float(total)))
    for name, events in gcs_events.items():
        temporal[name] = TemporalVariable(DISCRETE, events)

    # features behind the latent risk, measured on the window the pipeline keeps
    window = slice(max(0, hours - config.window_hours), hours)
    late = slice(max(0, hours - config.late_hours), hours)
    sbp = latent["SBP"][window]
    x = np.arange(len(sbp), dtype=float)
    trend = float(np.polyfit(x, sbp, 1)[0]) if len(sbp) > 1 else 0.0
    features = {"age": age, "late_hr_mean": float(latent["HR"][late].mean()), "sbp_trend": trend}

    stay = RawStay(
        stay_id=stay_id,
        static=static,
        start=start,
        end=end,
        temporal=temporal,
        icd9_codes=(ICD9[int(rng.integers(0, 3))],),
    )
    eps = float(rng.normal())
    outcome_draws = rng.random(4)
    return stay, features, eps, outcome_draws


def _attach_outcome(stay: RawStay, label: int, draws: np.ndarray) -> None:
    day = timedelta(days=1)
    if label:
        gap = (0.5 + 29.0 * draws[1]) * day
        if draws[0] < 0.75:
            stay.next_admission = stay.end + gap
        else:
            stay.death = stay.end + gap
    else:
        if draws[0] < 0.3:
            stay.next_admission = stay.end + (31 + 334 * draws[1]) * day
        if draws[2] < 0.1:
            stay.death = stay.end + (31 + 689 * draws[3]) * day
    for attr in ("next_admission", "death"):
        value = getattr(stay, attr)
        if value is not None:
            setattr(stay, attr, value.replace(microsecond=0))


def generate(config: SynthConfig, jobs: int = 1) -> tuple[list[RawStay], GroundTruth]:
    """Simulate the cohort. Each stay draws from its own (seed, index) stream, so ``jobs`` never changes output."""
    config.validate()
    simulate = partial(_simulate_stay, config)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sims = list(pool.map(simulate, range(config.n_records), chunksize=64))
    else:
        sims = [simulate(i) for i in range(config.n_records)]
    stays = [s[0] for s in sims]
    risk = np.zeros(config.n_records)
    for key, coef in RISK_COEFFICIENTS.items():
        vals = np.array([s[1][key] for s in sims])
        sd = vals.std()
        risk += coef * ((vals - vals.mean()) / sd if sd > 0 else 0.0)
    if risk.std() > 0:
        risk = (risk - risk.mean()) / risk.std()
    eps = np.array([s[2] for s in sims])
    planted = config.signal * risk
    noise = config.noise * (1.0 - config.signal) * eps
    score = planted + noise
    order = np.argsort(-score, kind="stable")
    labels = np.zeros(config.n_records, dtype=int)
    labels[order[: config.n_positive]] = 1
    threshold = float(score[order[config.n_positive - 1]])
    for stay, sim, label in zip(stays, sims, labels):
        _attach_outcome(stay, int(label), sim[3])
    truth = GroundTruth(
        stay_ids=[s.stay_id for s in stays],
        risk=planted.tolist(),
        noise=noise.tolist(),
        labels=labels.tolist(),
        threshold=threshold,
        config=asdict(config),
    )
    return stays, truth


def oracle_auc(truth: GroundTruth) -> float:
    """AUC of the planted risk against the labels: the ceiling a model can approach."""
    return rank_auc(truth.risk, truth.labels)


def write_cohort(stays: list[RawStay], truth: GroundTruth, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stays_path = out_dir / "stays.jsonl"
    truth_path = out_dir / "ground_truth.json"
    write_stays(stays, stays_path)
    truth_path.write_text(json.dumps(truth.to_json(), indent=1) + "\n")
    return stays_path, truth_path
