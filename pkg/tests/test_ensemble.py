import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustcf.data import Dataset
from robustcf.ensemble import (Leaf, ModelFormatError, Split, TrainConfig, Tree, TreeEnsemble, flip_model,
                               load_model, predict_margin, predict_proba, save_model, split_gain, train)

from conftest import stump


def test_stump_routing():
    m = stump()
    assert predict_margin(m, [0.2]) == -1.0
    assert predict_margin(m, [0.9]) == 2.0
    # ties go right
    assert predict_margin(m, [0.5]) == 2.0


def test_empty_ensemble_returns_base_margin():
    m = TreeEnsemble([], 0.3, 2)
    assert m.predict_margin(np.array([0.1, 0.7])) == 0.3
    assert np.all(m.predict_margin(np.zeros((4, 2))) == 0.3)


@pytest.mark.parametrize("margin, expected", [(0.0, 0.5), (-1.0, 0.26894), (2.0, 0.88080)])
def test_sigmoid_output(margin, expected):
    m = TreeEnsemble([], margin, 1)
    assert predict_proba(m, [0.0]) == pytest.approx(expected, abs=5e-6)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        stump().predict_margin([0.1, 0.2])
    with pytest.raises(ValueError):
        stump().predict_margin(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        stump().predict_margin([np.nan])


def test_feature_out_of_range():
    with pytest.raises(ModelFormatError):
        stump(feature=3, n_features=2)


def test_split_gain_arithmetic():
    assert split_gain(-2.0, 1.0, 2.0, 1.0, 1.0) == pytest.approx(2.0)


def test_train_separable_1d():
    x = np.linspace(0, 1, 100)
    data = Dataset(x.reshape(-1, 1), (x >= 0.5).astype(int), ["x"])
    m = train(data, TrainConfig(n_estimators=10, max_depth=2))
    assert np.all(m.predict(data.X) == data.y)


def test_zero_estimators():
    data = Dataset(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 1, 1, 1]), ["x"])
    m = train(data, TrainConfig(n_estimators=0))
    assert m.trees == []
    assert m.base_margin == pytest.approx(np.log(3))
    assert np.allclose(m.predict_proba(data.X), 0.75)


def test_train_errors():
    with pytest.raises(ValueError):
        train(Dataset(np.zeros((3, 1)), np.ones(3, dtype=int), ["x"]), TrainConfig())
    with pytest.raises(ValueError):
        train(Dataset(np.zeros((1, 1)), np.ones(1, dtype=int), ["x"]), TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(n_estimators=-1)


def test_training_loss_non_increasing(toy):
    data, _ = toy
    losses = []
    train(data, TrainConfig(n_estimators=30, max_depth=3), record_loss=losses)
    assert len(losses) == 31
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic(toy, tmp_path):
    data, model = toy
    again = train(data, TrainConfig(n_estimators=20, max_depth=3))
    save_model(model, tmp_path / "a.json")
    save_model(again, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_leaf_weights_match_formula():
    # a depth-1 tree on perfectly separable data: each leaf gets -lr*G/(H+lambda)
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0, 0, 1, 1])
    cfg = TrainConfig(n_estimators=1, max_depth=1, learning_rate=0.5, reg_lambda=1.0, min_child_weight=0.0)
    m = train(Dataset(X, y, ["x"]), cfg)
    p = 0.5  # base margin is logit(0.5) = 0
    g_left, h_left = 2 * (p - 0), 2 * p * (1 - p)
    assert m.trees[0].nodes[m.trees[0].root].threshold == 0.5
    assert m.predict_margin([0.0]) == pytest.approx(-0.5 * g_left / (h_left + 1.0))


def test_flip_identity(toy):
    data, model = toy
    probe = np.random.default_rng(1).random((1000, data.d)) * 1.4 - 0.2
    total = model.predict_proba(probe) + flip_model(model).predict_proba(probe)
    assert np.max(np.abs(total - 1.0)) < 1e-12


def test_flip_is_involution(toy):
    _, model = toy
    assert flip_model(flip_model(model)).to_dict() == model.to_dict()


def test_flip_rejects_every_counterfactual(toy):
    data, model = toy
    accepted = data.X[model.predict(data.X) == 1]
    assert np.all(flip_model(model).predict_proba(accepted) < 0.5)


def test_roundtrip_bit_identical(toy, tmp_path):
    _, model = toy
    path = tmp_path / "m.json"
    save_model(model, path)
    loaded = load_model(path)
    probe = np.random.default_rng(2).random((100, model.n_features))
    assert np.array_equal(loaded.predict_margin(probe), model.predict_margin(probe))


def _write(tmp_path, obj):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(obj))
    return path


def test_load_errors(tmp_path):
    good = stump().to_dict()
    cyc = json.loads(json.dumps(good))
    cyc["trees"][0]["nodes"][1] = {"id": 1, "feature": 0, "threshold": 0.1, "left": 0, "right": 2}
    with pytest.raises(ModelFormatError):
        load_model(_write(tmp_path, cyc))

    missing = dict(good)
    del missing["n_features"]
    with pytest.raises(ModelFormatError):
        load_model(_write(tmp_path, missing))

    with pytest.raises(ModelFormatError):
        load_model(_write(tmp_path, {**good, "version": 99}))

    dangling = json.loads(json.dumps(good))
    dangling["trees"][0]["nodes"][0]["right"] = 7
    with pytest.raises(ModelFormatError):
        load_model(_write(tmp_path, dangling))

    (tmp_path / "junk.json").write_text("{not json")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "junk.json")


def test_tree_validation():
    with pytest.raises(ModelFormatError):
        Tree({0: Split(0, 0, float("inf"), 1, 2), 1: Leaf(1, 0.0), 2: Leaf(2, 0.0)}, 0)
    with pytest.raises(ModelFormatError):
        Tree({0: Leaf(0, 0.0), 1: Leaf(1, 0.0)}, 0)
    with pytest.raises(ModelFormatError):
        Tree({0: Split(0, 0, 0.5, 1, 1), 1: Leaf(1, 0.0)}, 0)


def test_route_matches_predict(toy):
    data, model = toy
    for x in data.X[:20]:
        total = model.base_margin
        for t in model.trees:
            total += t.route(x).weight
        assert total == model.predict_margin(x)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3))
def test_proba_in_open_interval(toy, x):
    _, model = toy
    p = model.predict_proba(np.array(x))
    assert 0.0 < p < 1.0
    assert model.predict_margin(np.array(x)) == model.predict_margin(np.array(x))
