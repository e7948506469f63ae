import json
from collections import Counter
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smtaformer.cohort import (
    CONTINUOUS,
    DISCRETE,
    CohortRules,
    HourlyStay,
    RawStay,
    TemporalVariable,
    aggregate_hourly,
    apply_normalizer,
    fill_missing,
    filter_cohort,
    fit_normalizer,
    kfold,
    label_stay,
    read_stays,
    split_dataset,
    to_hourly,
    write_stays,
)
from smtaformer.errors import ConfigurationError, DataIntegrityError, PipelineOrderError, SchemaError

T0 = datetime(2150, 3, 1, 8, 0)
H = timedelta(hours=1)


def stay(hours=30.0, age=40, **kw):
    fields = dict(
        stay_id="s1",
        static={"age": age, "sex": "F", "insurance": "Medicare", "ethnicity": "WHITE"},
        start=T0,
        end=T0 + hours * H,
        temporal={"HR": TemporalVariable(CONTINUOUS, [(T0 + 2 * H, 80.0)])},
        icd9_codes=("4019",),
    )
    fields.update(kw)
    return RawStay(**fields)


# --- filtering -------------------------------------------------------------


def test_filter_examples():
    kept, _ = filter_cohort([stay(hours=23)])
    assert kept == []
    kept, excluded = filter_cohort([stay(age=17)])
    assert kept == [] and excluded["age"] == 1
    kept, _ = filter_cohort([stay(hours=30, age=40)])
    assert len(kept) == 1


def test_filter_rules_and_conservation():
    stays = [
        stay(icd9_codes=("2500",)),
        stay(age=17),
        stay(death=T0 + 10 * H),
        stay(pregnancy=True),
        stay(hours=72),
        stay(hours=24),
        stay(hours=71.9),
        stay(icd9_codes=("4010", "2500")),
    ]
    kept, excluded = filter_cohort(stays)
    assert len(kept) == 2
    assert excluded == {"diagnosis": 1, "age": 1, "died_in_icu": 1, "pregnancy": 1, "length_of_stay": 2}
    assert sum(excluded.values()) == len(stays) - len(kept)


def test_filter_allowlist_is_opaque():
    kept, _ = filter_cohort([stay(icd9_codes=("X1",))], CohortRules(icd9_allowlist=frozenset({"X1"})))
    assert len(kept) == 1


# --- labels ----------------------------------------------------------------


def test_label_examples():
    s = stay()
    assert label_stay(stay(next_admission=s.end + timedelta(days=12))) == 1
    assert label_stay(stay(next_admission=s.end + timedelta(days=45))) == 0
    assert label_stay(stay(death=s.end + timedelta(days=20))) == 1
    assert label_stay(stay(death=s.end + timedelta(days=31))) == 0
    assert label_stay(stay(next_admission=s.end + timedelta(days=30))) == 1
    with pytest.raises(DataIntegrityError):
        label_stay(stay(next_admission=s.end - H))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 400), st.floats(0, 400), st.booleans(), st.floats(1, 60), st.floats(0, 1))
def test_label_monotone_in_horizon(gap_readmit, gap_death, dies, horizon, shrink):
    s = stay()
    s.next_admission = s.end + timedelta(days=gap_readmit)
    s.death = s.end + timedelta(days=gap_death) if dies else None
    if label_stay(s, horizon) == 0:
        assert label_stay(s, horizon * shrink) == 0


# --- hourly aggregation ----------------------------------------------------


def test_aggregate_examples():
    end = T0 + 3 * H
    hr = [(T0 + timedelta(minutes=5), 80.0), (T0 + timedelta(minutes=40), 90.0)]
    assert aggregate_hourly(hr, CONTINUOUS, end, 3) == [85.0, None, None]
    eye = [(T0 + timedelta(minutes=m), v) for m, v in ((1, 3.0), (20, 3.0), (50, 4.0))]
    assert aggregate_hourly(eye, DISCRETE, end, 3)[0] == 3.0
    assert aggregate_hourly([], CONTINUOUS, end, 3) == [None, None, None]


def test_mode_tie_goes_to_most_recent():
    events = [(T0 + timedelta(minutes=m), v) for m, v in ((1, 2.0), (10, 5.0), (30, 5.0), (50, 2.0))]
    assert aggregate_hourly(events, DISCRETE, T0 + H, 1) == [2.0]
    events = [(T0 + timedelta(minutes=m), v) for m, v in ((1, 2.0), (10, 5.0))]
    assert aggregate_hourly(list(reversed(events)), DISCRETE, T0 + H, 1) == [5.0]


def test_window_is_anchored_at_stay_end():
    end = T0 + 30 * H
    events = [(T0 + H, 1.0), (end - 24 * H, 2.0), (end - timedelta(minutes=1), 3.0), (end, 4.0)]
    series = aggregate_hourly(events, CONTINUOUS, end, 24)
    assert len(series) == 24
    assert series[0] == 2.0  # the event at hour 1 of a 30 h stay is outside the last 24 h
    assert series[-1] == 3.5  # the final cell also takes the discharge instant


def test_fill_examples():
    assert fill_missing([None, 2.0, None, 4.0]) == [2.0, 2.0, 2.0, 4.0]
    assert fill_missing([1.0, 5.0, 3.0]) == [1.0, 5.0, 3.0]
    assert fill_missing([None] * 4, 7.0) == [7.0] * 4
    with pytest.raises(PipelineOrderError):
        fill_missing([None, None])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(-5, 5)), min_size=1, max_size=30))
def test_fill_leaves_no_gaps(series):
    out = fill_missing(series, 0.0)
    assert len(out) == len(series) and all(v is not None for v in out)
    observed = [v for v in series if v is not None]
    for a, b in zip(series, out):
        if a is not None:
            assert a == b
        elif observed:
            assert b in observed


# --- normalisation ---------------------------------------------------------


def hourly(i, hr, eye, age, sex="F", label=0):
    return HourlyStay(f"h{i}", {"age": age, "sex": sex, "insurance": "A", "ethnicity": "B"},
                      {"HR": hr, "Eye": eye}, {"HR": CONTINUOUS, "Eye": DISCRETE}, label)


def test_zscore_closed_form():
    state = fit_normalizer([hourly(0, [1.0], [1.0], 30), hourly(1, [3.0], [2.0], 50)])
    assert state.means["HR"] == 2.0 and state.stds["HR"] == 1.0
    rec = apply_normalizer(state, hourly(2, [3.0], [2.0], 40))
    assert rec.channels[0][0, 0] == 1.0
    assert rec.static[0] == 0.0


def test_one_hot_and_unseen_categories():
    train = [hourly(i, [1.0 * i], [float(v)], 30 + i) for i, v in enumerate((1, 2, 3, 4))]
    state = fit_normalizer(train)
    assert state.vocab["Eye"] == [1.0, 2.0, 3.0, 4.0]
    rec = apply_normalizer(state, hourly(9, [0.0], [3.0], 40))
    assert np.array_equal(rec.channels[1][0], [0, 0, 1, 0])
    unseen = Counter()
    rec = apply_normalizer(state, hourly(9, [0.0], [5.0], 40, sex="X"), unseen)
    assert not np.any(rec.channels[1][0])
    assert unseen == {"Eye": 1, "sex": 1}


def test_fully_missing_channel_uses_training_fallback():
    state = fit_normalizer([hourly(0, [1.0, None], [2.0, 2.0], 30), hourly(1, [5.0, 3.0], [1.0, 2.0], 50)])
    assert state.fallback["HR"] == 3.0 and state.fallback["Eye"] == 2.0
    rec = apply_normalizer(state, hourly(2, [None, None], [None, None], 40))
    assert np.allclose(rec.channels[0][:, 0], (3.0 - state.means["HR"]) / state.stds["HR"])
    assert np.array_equal(rec.channels[1], [[0, 1], [0, 1]])


def test_zero_variance_variable_is_dropped_with_report():
    state = fit_normalizer([hourly(0, [4.0], [1.0], 30), hourly(1, [4.0], [2.0], 50)])
    assert "HR" not in state.channels
    assert state.dropped == [{"variable": "HR", "reason": "zero training variance"}]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_apply_round_trip_standardizes(seed):
    r = np.random.default_rng(seed)
    train = []
    for i in range(int(r.integers(3, 20))):
        hr = [None if r.random() < 0.3 else float(r.normal(80, 15)) for _ in range(6)]
        eye = [None if r.random() < 0.3 else float(r.integers(1, 5)) for _ in range(6)]
        train.append(hourly(i, hr, eye, float(r.uniform(18, 90))))
    state = fit_normalizer(train)
    recs = [apply_normalizer(state, h) for h in train]
    for c, name in enumerate(state.channels):
        if state.kinds[name] == CONTINUOUS:
            v = np.concatenate([r_.channels[c].ravel() for r_ in recs])
            assert abs(v.mean()) < 1e-10 and abs(v.var() - 1) < 1e-8
        else:
            rows = np.concatenate([r_.channels[c] for r_ in recs])
            assert np.all(rows.sum(axis=1) == 1)
    if "age" in state.static_continuous:
        ages = np.array([r_.static[0] for r_ in recs])
        assert abs(ages.mean()) < 1e-10 and abs(ages.var() - 1) < 1e-8
    assert all(not np.isnan(c).any() for r_ in recs for c in r_.channels)


def test_scaling_is_undone_by_refit():
    r = np.random.default_rng(3)
    base = [hourly(i, r.normal(size=4).tolist(), [1.0, 2.0, 1.0, 2.0], 20 + i) for i in range(6)]
    scaled = [hourly(h.stay_id, [7.5 * v + 3 for v in h.series["HR"]], h.series["Eye"], h.static["age"]) for h in base]
    a = [apply_normalizer(fit_normalizer(base), h).channels[0] for h in base]
    b = [apply_normalizer(fit_normalizer(scaled), h).channels[0] for h in scaled]
    assert max(np.max(np.abs(x - y)) for x, y in zip(a, b)) < 1e-12


# --- splitting -------------------------------------------------------------


def test_split_examples():
    train, test = split_dataset([0] * 9 + [1], 0.1, seed=0)
    assert len(train) == 9 and len(test) == 1
    folds = kfold([0, 1] * 5, 5, seed=0)
    assert [len(f) for f in folds] == [2] * 5


def test_split_table_one_arithmetic():
    labels = [1] * 1110 + [0] * (10008 - 1110)
    train, test = split_dataset(labels, 0.1, seed=0)
    assert len(test) == 1001
    assert sum(labels[i] for i in test) in (110, 111)
    assert sorted(train + test) == list(range(10008))


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 400), st.floats(0.02, 0.5), st.integers(2, 7), st.integers(0, 2**32 - 1))
def test_split_and_folds_are_stratified_partitions(n, rate, k, seed):
    labels = (np.random.default_rng(seed).random(n) < rate).astype(int).tolist()
    train, test = split_dataset(labels, 0.1, seed)
    assert len(test) == int(np.floor(0.1 * n + 0.5))
    assert sorted(train + test) == list(range(n))
    pos = sum(labels)
    assert abs(sum(labels[i] for i in test) - len(test) * pos / n) <= 1
    train_labels = [labels[i] for i in train]
    folds = kfold(train_labels, k, seed)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(i for f in folds for i in f) == list(range(len(train)))
    fold_pos = [sum(train_labels[i] for i in f) for f in folds]
    assert max(fold_pos) - min(fold_pos) <= 1
    assert (train, test) == split_dataset(labels, 0.1, seed)
    assert folds == kfold(train_labels, k, seed)


def test_split_errors():
    with pytest.raises(ConfigurationError):
        kfold([0, 1, 0], 5)
    with pytest.raises(ConfigurationError):
        split_dataset([0, 1], 1.5)


# --- raw stay file format --------------------------------------------------


def test_stay_json_round_trip(tmp_path):
    s = stay(next_admission=T0 + 200 * H, temporal={
        "HR": TemporalVariable(CONTINUOUS, [(T0 + H, 80.5)]),
        "Eye": TemporalVariable(DISCRETE, [(T0 + 2 * H, 3.0)]),
    })
    write_stays([s, s], tmp_path / "stays.jsonl")
    back = read_stays(tmp_path / "stays.jsonl")
    assert back == [s, s]


def test_schema_errors_report_line_numbers(tmp_path):
    good = json.dumps(stay().to_json())
    bad = json.loads(good)
    del bad["static"]["age"]
    (tmp_path / "x.jsonl").write_text(good + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(SchemaError, match=r":2:"):
        read_stays(tmp_path / "x.jsonl")
    late = stay().to_json()
    late["temporal"]["HR"]["events"][0][0] = (T0 + 100 * H).isoformat()
    (tmp_path / "y.jsonl").write_text(good + "\n\n" + json.dumps(late) + "\n")
    with pytest.raises(SchemaError, match=r":3:.*outside"):
        read_stays(tmp_path / "y.jsonl")
    (tmp_path / "z.jsonl").write_text("{not json\n")
    with pytest.raises(SchemaError, match=r":1:"):
        read_stays(tmp_path / "z.jsonl")


def test_to_hourly_uses_label_and_grid():
    s = stay(hours=30, death=T0 + 30 * H + timedelta(days=3))
    h = to_hourly(s, steps=24)
    assert h.label == 1 and len(h.series["HR"]) == 24
