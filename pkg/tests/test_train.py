import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from itcrwkv import tensor as T
from itcrwkv import train as tr
from itcrwkv.container import VersionError, read_container, write_container
from itcrwkv.synth import SynthConfig, split
from itcrwkv.train import (AdamState, TrainConfig, TrainingDiverged, adam_step, classification_metrics,
                           cosine_lr, evaluate, load_checkpoint, save_checkpoint, snapshot, train)

SMALL = SynthConfig(seed=9, n_min=3, n_max=6, d_morph=4, d_tissue=3, grid_h=4, grid_w=4)


def small_cfg(**kw):
    base = dict(lr=3e-3, batch_size=4, epochs=3, patience=10, seed=2, depth=1, width=8, heads=2,
                hidden=8, dropout=0.1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return split(SMALL, (12, 6, 6))


def test_adam_first_step_is_minus_lr_times_sign():
    x = T.parameter(np.array([2.0, -3.0, 0.5]))
    x.grad = np.array([4.0, -0.01, 1e3])
    adam_step({"x": x}, AdamState(), 0.1)
    assert np.allclose(x.data, [1.9, -2.9, 0.4], atol=1e-8)


def test_adam_zero_gradient_is_a_no_op():
    x = T.parameter(np.array([1.0, 2.0]))
    st_ = AdamState()
    for _ in range(3):
        x.grad = None
        adam_step({"x": x}, st_, 0.5)
    assert x.data.tolist() == [1.0, 2.0] and st_.t == 3


def test_adam_minimizes_square():
    x = T.parameter(np.array([1.0]))
    state = AdamState()
    for _ in range(100):
        x.grad = 2 * x.data
        adam_step({"x": x}, state, 0.1)
    assert abs(x.data[0]) < 0.05


def test_adam_rejects_non_finite_gradients():
    x = T.parameter(np.zeros(2))
    x.grad = np.array([0.0, np.nan])
    with pytest.raises(tr.NonFiniteGradientError, match="'x'"):
        adam_step({"x": x}, AdamState(), 0.1)
    assert x.data.tolist() == [0.0, 0.0]


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(0.3, 7, 10, cosine=False) == 0.3
    lrs = [cosine_lr(1.0, e, 20) for e in range(21)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_single_class_predictor_on_balanced_two_class_set():
    m = classification_metrics([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert m["weighted_f1"] == pytest.approx(1 / 3)
    assert m["f1"].tolist() == pytest.approx([2 / 3, 0.0])
    assert m["accuracy"] == 0.5


def weighted_f1_oracle(y, p, C):
    total = 0.0
    for c in range(C):
        tp = sum(1 for a, b in zip(y, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, p) if a == c and b != c)
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        total += (tp + fn) * f1
    return total / len(y)


@given(st.integers(2, 7), st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=60))
def test_weighted_f1_matches_counting_oracle(C, pairs):
    y = [a % C for a, _ in pairs]
    p = [b % C for _, b in pairs]
    m = classification_metrics(y, p, C)
    assert m["weighted_f1"] == pytest.approx(weighted_f1_oracle(y, p, C), abs=1e-12)
    assert m["confusion"].sum() == len(y)


def test_empty_evaluation_raises(data):
    with pytest.raises(ValueError, match="empty"):
        classification_metrics([], [], 3)
    model = train(small_cfg(epochs=1), data[0], data[1]).model
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, [])


def test_zero_lr_keeps_initial_parameters(data):
    tr_, va, te = data
    res = train(small_cfg(lr=0.0, epochs=2), tr_, va)
    init = snapshot(tr.Model.init(res.checkpoint.model_cfg, seed=2))
    assert all(np.array_equal(init[k], v) for k, v in res.checkpoint.params.items())
    assert evaluate(res.model, te)["accuracy"] == evaluate(tr.Model.init(res.checkpoint.model_cfg, 2), te)["accuracy"]


def test_same_seed_same_run(data):
    a = train(small_cfg(), data[0], data[1])
    b = train(small_cfg(), data[0], data[1])
    assert a.history == b.history
    assert all(np.array_equal(a.checkpoint.params[k], v) for k, v in b.checkpoint.params.items())
    c = train(small_cfg(seed=3), data[0], data[1])
    assert c.history != a.history


def test_resume_matches_uninterrupted(data, tmp_path):
    full = train(small_cfg(), data[0], data[1])
    part = train(small_cfg(), data[0], data[1], stop_after=1)
    assert part.checkpoint.epoch == 1
    save_checkpoint(part.checkpoint, tmp_path / "c.bin")
    rest = train(small_cfg(), data[0], data[1], resume=load_checkpoint(tmp_path / "c.bin"))
    assert rest.history == full.history
    for k, v in full.checkpoint.params.items():
        assert v.tobytes() == rest.checkpoint.params[k].tobytes()
    assert rest.checkpoint.adam.t == full.checkpoint.adam.t


def test_checkpoint_version_checked(data, tmp_path):
    res = train(small_cfg(epochs=1), data[0], data[1])
    path = tmp_path / "c.bin"
    save_checkpoint(res.checkpoint, path)
    arrays, meta = read_container(path)
    meta["version"] = 99
    write_container(path, tr.CHECKPOINT_KIND, arrays, meta)
    with pytest.raises(VersionError, match="99"):
        load_checkpoint(path)


def test_divergence_keeps_last_good_checkpoint(data, monkeypatch):
    real = tr.sample_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] > len(data[0]):
            raise T.NonFiniteError("loss became nan")
        return real(*args, **kw)

    monkeypatch.setattr(tr, "sample_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(small_cfg(), data[0], data[1])
    good = info.value.checkpoint
    assert good.epoch == 1 and len(good.history) == 1
    monkeypatch.setattr(tr, "sample_loss", real)
    ref = train(small_cfg(), data[0], data[1], stop_after=1).checkpoint
    assert all(np.array_equal(ref.params[k], v) for k, v in good.params.items())


def test_early_stopping_with_patience(data):
    res = train(small_cfg(lr=0.0, epochs=10, patience=2), data[0], data[1])
    assert res.stopped_early and len(res.history) == 3
    assert res.checkpoint.best_epoch == 0


def test_overlapping_splits_rejected(data):
    with pytest.raises(ValueError, match="overlap"):
        train(small_cfg(), data[0], data[0][:2])


def test_history_and_summary_files(data, tmp_path):
    res = train(small_cfg(epochs=2), data[0], data[1])
    tr.write_history_csv(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].split(",") == tr.HISTORY_FIELDS and len(lines) == 3
    m = evaluate(res.model, data[2])
    tr.write_summary(m, tmp_path / "s.txt")
    assert "weighted_f1 = " in (tmp_path / "s.txt").read_text()
    assert all(math.isfinite(r["train_loss"]) for r in res.history)
