import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smtaformer.autodiff import Tensor
from smtaformer.errors import ConfigurationError, DimensionError, NumericError
from smtaformer.experiment import logistic_config_for, model_config_for
from smtaformer.training import (
    AdamState,
    ArrayDataset,
    TrainConfig,
    adam_step,
    bce_loss,
    bce_value,
    predict,
    train,
)


def test_bce_examples():
    assert bce_loss(Tensor([0.5]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss(Tensor([0.5] * 7), [1, 0, 0, 1, 1, 0, 0]).item() == pytest.approx(math.log(2), abs=1e-15)
    exact = bce_loss(Tensor([1.0, 0.0, 1.0]), [1, 0, 1]).item()
    assert exact <= -math.log(1 - 1e-7) + 1e-18


def test_bce_length_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(Tensor([0.5, 0.5]), [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=40).filter(lambda y: 0 < sum(y) < len(y)))
def test_bce_minimized_at_positive_rate(labels):
    y = np.array(labels, dtype=float)
    rate = y.mean()
    grid = np.linspace(0.001, 0.999, 999)
    best = grid[np.argmin([bce_value(np.full(len(y), c), y) for c in grid])]
    assert abs(best - rate) <= 0.001
    assert bce_value(np.full(len(y), rate), y) <= bce_value(np.full(len(y), best), y) + 1e-15


def test_adam_first_step():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"w": p}, AdamState(), TrainConfig())
    assert p.data[0] - 2.0 == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.arange(4.0), requires_grad=True)
    state = AdamState()
    for _ in range(5):
        p.grad = np.zeros(4)
        adam_step({"w": p}, state, TrainConfig())
    assert np.array_equal(p.data, np.arange(4.0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6).filter(lambda g: g != 0), min_size=1, max_size=8))
def test_adam_first_step_opposes_gradient(g):
    g = np.array(g)
    p = Tensor(np.zeros(len(g)), requires_grad=True)
    p.grad = g
    adam_step({"w": p}, AdamState(), TrainConfig())
    assert np.array_equal(np.sign(p.data), -np.sign(g))


def test_adam_l2_adds_decay_to_gradient():
    p = Tensor(np.array([3.0]), requires_grad=True)
    p.grad = np.zeros(1)
    adam_step({"w": p}, AdamState(), TrainConfig(l2=0.1))
    assert p.data[0] - 3.0 == pytest.approx(-0.001 * 0.3 / (0.3 + 1e-8), abs=1e-15)


def test_adam_non_finite_gradient_names_parameter():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError, match="encoder.w_query"):
        adam_step({"encoder.w_query": p}, AdamState(), TrainConfig())


@pytest.mark.parametrize("kw", [dict(lr=0), dict(batch_size=0), dict(patience=0), dict(max_epochs=0), dict(l2=-1)])
def test_train_config_invariants(kw, small_dataset):
    with pytest.raises(ConfigurationError):
        train(logistic_config_for(small_dataset), small_dataset.train, small_dataset.test, TrainConfig(**kw))


def test_empty_training_set(small_dataset):
    with pytest.raises(ConfigurationError):
        train(logistic_config_for(small_dataset), [], small_dataset.test, TrainConfig(max_epochs=1))


def _flipped(records):
    out = []
    for r in records:
        out.append(type(r)(r.stay_id, r.static, r.channels, 1 - r.label))
    return out


def test_early_stopping_returns_best_epoch(small_dataset):
    # validation labels are the training labels flipped, so validation loss rises after the first epoch
    recs = small_dataset.train[:40]
    cfg = logistic_config_for(small_dataset)
    model, hist = train(cfg, recs, _flipped(recs), TrainConfig(patience=1, max_epochs=20, lr=0.01))
    assert hist.val_loss[1] > hist.val_loss[0]
    assert hist.stopped_epoch == 2 and hist.best_epoch == 1
    one, _ = train(cfg, recs, _flipped(recs), TrainConfig(patience=1, max_epochs=1, lr=0.01))
    for k, p in model.named_parameters().items():
        assert np.array_equal(p.data, one.named_parameters()[k].data)


def test_best_epoch_never_after_best_validation(small_dataset):
    cfg = model_config_for(small_dataset, d=8, heads=2, layers=1, head_hidden=8)
    _, hist = train(cfg, small_dataset.train[:60], small_dataset.folds[0], TrainConfig(patience=2, max_epochs=6))
    best = hist.val_loss[hist.best_epoch - 1]
    assert best == min(hist.val_loss)
    assert hist.stopped_epoch - hist.best_epoch <= 2
    assert len(hist.train_loss) == len(hist.val_loss) == len(hist.val_auc) == hist.stopped_epoch


def test_training_is_deterministic(small_dataset):
    cfg = model_config_for(small_dataset, d=8, heads=2, layers=1, head_hidden=8, seed=4)
    tc = TrainConfig(max_epochs=3, seed=9)
    a, ha = train(cfg, small_dataset.train[:50], small_dataset.folds[1], tc)
    b, hb = train(cfg, small_dataset.train[:50], small_dataset.folds[1], tc)
    assert ha == hb
    for k, p in a.named_parameters().items():
        assert np.array_equal(p.data, b.named_parameters()[k].data)
    c, hc = train(cfg, small_dataset.train[:50], small_dataset.folds[1], TrainConfig(max_epochs=3, seed=10))
    assert hc.train_loss != ha.train_loss


def test_small_model_fits_a_few_records(small_dataset):
    recs = small_dataset.train[:8]
    cfg = model_config_for(small_dataset, d=8, heads=1, layers=1, head_hidden=16)
    model, hist = train(cfg, recs, recs, TrainConfig(max_epochs=150, patience=150, lr=0.01))
    assert min(hist.train_loss) < 0.05
    probs = predict(model, ArrayDataset.from_records(recs))
    assert bce_value(probs, [r.label for r in recs]) == pytest.approx(hist.val_loss[hist.best_epoch - 1], abs=1e-12)


def test_history_csv(tmp_path, small_dataset):
    _, hist = train(logistic_config_for(small_dataset), small_dataset.train[:20], small_dataset.test, TrainConfig(max_epochs=2))
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_auc" and len(lines) == 3


def test_target_loss_stops_early(small_dataset):
    recs = small_dataset.train[:8]
    cfg = model_config_for(small_dataset, d=8, heads=1, layers=1, head_hidden=16)
    _, full = train(cfg, recs, recs, TrainConfig(max_epochs=150, patience=150, lr=0.01))
    _, hist = train(cfg, recs, recs, TrainConfig(max_epochs=150, patience=150, lr=0.01, target_loss=0.05))
    first = next(i for i, v in enumerate(full.train_loss, 1) if v < 0.05)
    assert hist.stopped_epoch == first and hist.train_loss == full.train_loss[:first]
    with pytest.raises(ConfigurationError):
        TrainConfig(target_loss=0.0).validate()
