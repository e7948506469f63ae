import json

import numpy as np
import pytest

from smtaformer.cohort import CONTINUOUS, DISCRETE, filter_cohort, label_stay
from smtaformer.errors import ConfigurationError
from smtaformer.synth import CHANNELS, SynthConfig, generate, oracle_auc, write_cohort


@pytest.fixture(scope="module")
def small():
    return generate(SynthConfig(n_records=300, seed=11))


def test_exact_positive_count():
    for n, rate, want in ((1000, 0.11, 110), (300, 0.111, 33), (10008, 0.111, 1111)):
        assert SynthConfig(n_records=n, positive_rate=rate).n_positive == want
    _, truth = generate(SynthConfig(n_records=1000, positive_rate=0.11, seed=1))
    assert sum(truth.labels) == 110


def test_labels_follow_outcome_timestamps(small):
    stays, truth = small
    assert [label_stay(s) for s in stays] == truth.labels


def test_stays_pass_the_cohort_filter(small):
    stays, _ = small
    kept, excluded = filter_cohort(stays)
    assert len(kept) == len(stays) and sum(excluded.values()) == 0
    assert all(24 < s.hours < 72 for s in stays)


def test_roster(small):
    stays, _ = small
    s = stays[0]
    assert tuple(s.temporal) == CHANNELS
    kinds = [s.temporal[c].kind for c in CHANNELS]
    assert kinds == [CONTINUOUS] * 8 + [DISCRETE] * 4
    assert set(s.static) == {"age", "sex", "insurance", "ethnicity"}


def test_gcs_total_is_sum_of_components(small):
    stays, _ = small
    for s in stays[:20]:
        parts = [dict(s.temporal[c].events) for c in ("Eye", "Motor", "Verbal")]
        for t, total in s.temporal["Total"].events:
            if all(t in p for p in parts):
                assert total == sum(p[t] for p in parts)


def test_same_seed_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_records=50, seed=5)
    write_cohort(*generate(cfg), tmp_path / "a")
    write_cohort(*generate(cfg), tmp_path / "b")
    write_cohort(*generate(cfg, jobs=2), tmp_path / "c")
    for name in ("stays.jsonl", "ground_truth.json"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()
    assert len((tmp_path / "a" / "stays.jsonl").read_text().splitlines()) == 50
    assert (tmp_path / "a" / "stays.jsonl").read_bytes() != write_and_read(tmp_path / "d", SynthConfig(n_records=50, seed=6))


def write_and_read(path, cfg):
    write_cohort(*generate(cfg), path)
    return (path / "stays.jsonl").read_bytes()


def test_oracle_auc_extremes():
    _, truth = generate(SynthConfig(n_records=400, signal=1.0, noise=0.0, seed=2))
    assert oracle_auc(truth) == 1.0
    _, truth = generate(SynthConfig(n_records=400, signal=0.0, seed=2))
    assert abs(oracle_auc(truth) - 0.5) < 0.1


def test_oracle_auc_monotone_in_signal():
    aucs = [oracle_auc(generate(SynthConfig(n_records=600, signal=s, seed=3))[1]) for s in np.linspace(0, 1, 6)]
    assert all(b >= a for a, b in zip(aucs, aucs[1:]))


def test_ground_truth_records_the_threshold(small):
    _, truth = small
    score = np.add(truth.risk, truth.noise)
    labels = np.array(truth.labels)
    assert np.all(score[labels == 1] >= truth.threshold)
    assert np.all(score[labels == 0] <= truth.threshold)
    doc = json.loads(json.dumps(truth.to_json()))
    assert doc["coefficients"] == {"age": 1.0, "late_hr_mean": 0.8, "sbp_trend": -0.6}


def test_missingness_drops_events():
    full, _ = generate(SynthConfig(n_records=20, missingness=0.0, seed=4))
    sparse, _ = generate(SynthConfig(n_records=20, missingness=0.5, seed=4))
    count = lambda stays: sum(len(v.events) for s in stays for v in s.temporal.values())
    assert count(sparse) < 0.7 * count(full)


@pytest.mark.parametrize("kw", [dict(positive_rate=0.0), dict(positive_rate=1.0), dict(n_records=5, positive_rate=0.1),
                                dict(signal=1.5), dict(missingness=1.0), dict(noise=-1.0)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigurationError):
        generate(SynthConfig(**kw))
