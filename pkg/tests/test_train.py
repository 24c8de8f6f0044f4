import numpy as np
import pytest

from compatfam import autodiff as ad
from compatfam.compat import CompatConfig, CompatModel, batch_loss, loss_and_grads
from compatfam.data import DataError, PairSet, RelationSpec, gen_procedural_items
from compatfam.experiments import make_dataset
from compatfam.train import (AdamState, PairData, TrainConfig, adam_step, check_disjoint, read_history_csv,
                             train_compat, write_history_csv)


def test_adam_zero_grad_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    adam_step(AdamState(), params, {"w": np.zeros(2)}, TrainConfig())
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    cfg = TrainConfig(learning_rate=0.01)
    g = np.array([3.0, -0.5, 1e-3])
    params = {"w": np.zeros(3)}
    adam_step(AdamState(), params, {"w": g}, cfg)
    # bias-corrected m/sqrt(v) is exactly g/|g| on step one, up to epsilon
    np.testing.assert_allclose(params["w"], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_sign_symmetry():
    params = {"w": np.array([0.5, 0.5])}
    state = AdamState()
    for _ in range(5):
        adam_step(state, params, {"w": np.array([2.0, -2.0])}, TrainConfig())
    assert params["w"][0] - 0.5 == pytest.approx(-(params["w"][1] - 0.5), abs=1e-15)


def test_adam_rejects_nonfinite():
    with pytest.raises(ad.NonFiniteError):
        adam_step(AdamState(), {"w": np.zeros(1)}, {"w": np.array([np.nan])}, TrainConfig())


def test_adam_state_roundtrip():
    state = AdamState()
    params = {"a": np.ones(2), "b": np.ones((2, 2))}
    adam_step(state, params, {"a": np.ones(2), "b": np.ones((2, 2))}, TrainConfig())
    back = AdamState.from_tensors(state.tensors())
    assert back.t == 1
    np.testing.assert_array_equal(back.m["b"], state.m["b"])
    np.testing.assert_array_equal(back.v["a"], state.v["a"])


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"beta1": 1.0}, {"batch_size": 1}, {"epochs": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def _toy(num_classes=4, shifts=(1,), per_class=50, seed=0):
    spec = RelationSpec(num_classes, set(shifts))
    ds = make_dataset(spec, per_class=per_class, image_size=8, seed=seed, pairs_per_item=4)
    return ds.pair_data("train"), ds.pair_data("val")


def _model(K=2, N=4, seed=0, lambda_m=0.0):
    return CompatModel(CompatConfig(K=K, N=N, trunk=(32,), input_dim=64, lambda_m=lambda_m), seed=seed)


def test_separable_toy_reaches_high_auc():
    train, val = _toy()
    res = train_compat(_model(), train, val, TrainConfig(epochs=50))
    assert max(r["val_auc"] for r in res.history) >= 0.99


def test_zero_epochs_returns_initial_model():
    train, val = _toy()
    m = _model()
    res = train_compat(m, train, val, TrainConfig(epochs=0))
    assert res.history == []
    for k in m.params:
        np.testing.assert_array_equal(res.best_model.params[k], m.params[k])


def test_training_is_deterministic():
    train, val = _toy()
    a = train_compat(_model(), train, val, TrainConfig(epochs=3, seed=4))
    b = train_compat(_model(), train, val, TrainConfig(epochs=3, seed=4))
    assert a.history == b.history


def test_best_model_matches_history_minimum():
    train, val = _toy()
    res = train_compat(_model(), train, val, TrainConfig(epochs=8))
    losses = [r["val_loss"] for r in res.history]
    best = int(np.argmin(losses))
    assert res.best_epoch == res.history[best]["epoch"]
    loss, _ = batch_loss(res.best_model, val.xq, val.xc, val.labels)
    assert loss == pytest.approx(min(losses), rel=1e-12)


def test_overfit_tiny_batch():
    rng = np.random.default_rng(0)
    xq, xc = rng.random((8, 64)), rng.random((8, 64))
    labels = np.array([1, -1] * 4)
    # positives can do no better than -log sigmoid(c) and Adam moves c by about lr per step,
    # so start c where a 0.01 loss is reachable
    m = CompatModel(CompatConfig(K=2, N=4, trunk=(32,), input_dim=64, c_init=5.0), seed=0)
    state, cfg = AdamState(), TrainConfig(learning_rate=0.003)
    for _ in range(500):
        info, grads = loss_and_grads(m, xq, xc, labels)
        adam_step(state, m.params, grads, cfg)
    assert batch_loss(m, xq, xc, labels)[0] < 0.01


def test_weights_equal_duplication():
    rng = np.random.default_rng(1)
    xq, xc = rng.random((4, 64)), rng.random((4, 64))
    labels = np.array([1, -1, 1, -1])
    w = np.array([3, 1, 2, 1])
    m = _model(lambda_m=0.3)
    weighted, _ = batch_loss(m, xq, xc, labels, w)
    rep = np.repeat(np.arange(4), w)
    duplicated, _ = batch_loss(m, xq[rep], xc[rep], labels[rep])
    assert weighted == pytest.approx(duplicated, rel=1e-12)


def test_partial_last_batch_is_used():
    train, val = _toy(per_class=20)
    assert len(train) % 7 != 0
    res = train_compat(_model(), train, val, TrainConfig(epochs=1, batch_size=7))
    assert res.adam.t == -(-len(train) // 7)


def test_resume_continues_epochs():
    train, val = _toy()
    first = train_compat(_model(), train, val, TrainConfig(epochs=2))
    second = train_compat(first.last_model, train, val, TrainConfig(epochs=2), start_epoch=2, adam=first.adam)
    assert [r["epoch"] for r in first.history + second.history] == [1, 2, 3, 4]


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_returns_last_finite_model():
    train, val = _toy()
    m = _model()
    m.params["trunk.0.W"] = m.params["trunk.0.W"] * 1e200  # squared distances overflow
    res = train_compat(m, train, val, TrainConfig(epochs=3))
    assert res.diverged and res.history == []


def test_disjoint_pairs_check():
    a = PairSet(np.array([1]), np.array([2]), np.array([1]), "train")
    b = PairSet(np.array([3]), np.array([2]), np.array([1]), "val")
    with pytest.raises(DataError):
        check_disjoint(a, b)


def test_history_csv_roundtrip(tmp_path):
    history = [{"epoch": 1, "train_loss": 0.1 + 0.2, "val_loss": 1 / 3, "val_auc": 0.5}]
    write_history_csv(history, tmp_path / "h.csv")
    assert read_history_csv(tmp_path / "h.csv") == history
