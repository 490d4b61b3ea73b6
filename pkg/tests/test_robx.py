import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustcf.generators import CounterfactualResult, GeneratorConfig, NNGenerator, make_generator
from robustcf.robx import (ConservativeIndex, NoBaseCounterfactual, NoConservativeCounterfactual, RobXConfig,
                           conservative_counterfactual, robx)
from robustcf.stability import StabilityParams, stability_test

from conftest import ConstantModel, TableModel

CCF_TABLE = {(1, 0): 0.6, (0, 2): 0.9}
CCF_DATA = np.array(list(CCF_TABLE), dtype=float)


def test_ccf_filtered_scan():
    model = TableModel(CCF_TABLE)
    index = ConservativeIndex(model, CCF_DATA, StabilityParams(tau=0.7), scores=np.array([0.55, 0.8]))
    assert conservative_counterfactual(np.zeros(2), model, CCF_DATA, index.params, index=index) == \
        [pytest.approx([0.0, 2.0])]


def test_ccf_low_tau_is_nearest_neighbor(toy):
    data, model = toy
    params = StabilityParams(K=50, tau=-1.0)
    nn = NNGenerator(model, data)
    index = ConservativeIndex(model, data, params)
    for x in data.X[model.predict(data.X) == 0][:10]:
        ccf = conservative_counterfactual(x, model, data, params, index=index)
        assert np.array_equal(ccf[0], nn(x).cf)


def test_ccf_can_be_empty(toy):
    data, model = toy
    params = StabilityParams(K=100, tau=0.999)
    x = data.X[model.predict(data.X) == 0][0]
    assert conservative_counterfactual(x, model, data, params) == []


def test_ccf_count_and_order(toy):
    data, model = toy
    params = StabilityParams(K=100, tau=0.6)
    x = data.X[model.predict(data.X) == 0][0]
    pts = conservative_counterfactual(x, model, data, params, count=4)
    d = [np.abs(p - x).sum() for p in pts]
    assert d == sorted(d)
    assert all(stability_test(p, model, params) and model.predict_proba(p) > 0.5 for p in pts)


def _stub_base(cf):
    cf = np.asarray(cf, dtype=float)
    return lambda x: CounterfactualResult(np.asarray(x, float), cf, "STUB", float(np.abs(x - cf).sum()), 0.9)


def test_hand_stepped_example():
    target = np.array([1.0, 1.0])
    stab = lambda z: 1.0 if np.linalg.norm(z - target) < 0.3 else 0.0
    cfg = RobXConfig(alpha=0.5, c=1, stability=StabilityParams(tau=0.65))
    res, trace = robx(np.array([0.0, 0.0]), ConstantModel(0.9), None, _stub_base([0.0, 0.0]), cfg,
                      anchors=[target], stability_fn=stab)
    assert [z.tolist() for z in trace.iterates[0]] == [[0.5, 0.5], [0.75, 0.75], [0.875, 0.875]]
    assert res.cf.tolist() == [0.875, 0.875]
    assert res.method == "STUB+RobX"


def test_early_exit():
    cfg = RobXConfig()
    res, trace = robx(np.zeros(2), ConstantModel(0.9), None, _stub_base([0.3, 0.4]), cfg,
                      stability_fn=lambda z: 0.9)
    assert trace.early_exit and trace.iterates == []
    assert res.cf.tolist() == [0.3, 0.4]


def test_alpha_one_lands_on_anchor():
    anchor = np.array([0.7, 0.2])
    cfg = RobXConfig(alpha=1.0, c=1)
    stab = lambda z: 0.9 if np.array_equal(z, anchor) else 0.0
    res, trace = robx(np.zeros(2), ConstantModel(0.9), None, _stub_base([0.1, 0.1]), cfg,
                      anchors=[anchor], stability_fn=stab)
    assert len(trace.iterates[0]) == 1
    assert np.array_equal(res.cf, anchor)


def test_fallback_to_anchor():
    anchor = np.array([1.0, 1.0])
    cfg = RobXConfig(alpha=0.1, c=1, max_steps=5)
    res, trace = robx(np.zeros(2), ConstantModel(0.9), None, _stub_base([0.0, 0.0]), cfg,
                      anchors=[anchor], stability_fn=lambda z: 0.0)
    assert trace.fell_back == [True]
    assert np.array_equal(res.cf, anchor)


def test_rejects_stable_but_unaccepted_iterate():
    # stability passes everywhere but the model only accepts x0 >= 0.6
    class Step:
        def predict_proba(self, z):
            return 0.9 if np.asarray(z)[0] >= 0.6 else 0.1

    cfg = RobXConfig(alpha=0.5, c=1)
    res, _ = robx(np.zeros(1), Step(), None, _stub_base([0.0]), cfg, anchors=[np.array([1.0])],
                  stability_fn=lambda z: 1.0)
    assert res.cf.tolist() == [0.75]


def test_picks_cheapest_terminal_iterate():
    anchors = [np.array([2.0, 0.0]), np.array([0.0, 1.0])]
    cfg = RobXConfig(alpha=1.0, c=2)
    res, trace = robx(np.zeros(2), ConstantModel(0.9), None, _stub_base([0.5, 0.5]), cfg,
                      anchors=anchors, stability_fn=lambda z: 0.9 if z.max() >= 1 else 0.0)
    assert trace.chosen == 1
    assert res.cf.tolist() == [0.0, 1.0]


def test_errors():
    cfg = RobXConfig()
    absent = lambda x: CounterfactualResult(np.asarray(x, float), None, "STUB")
    with pytest.raises(NoBaseCounterfactual):
        robx(np.zeros(2), ConstantModel(0.9), None, absent, cfg)
    with pytest.raises(NoConservativeCounterfactual):
        robx(np.zeros(2), ConstantModel(0.9), None, _stub_base([0.1, 0.1]), cfg, anchors=[],
             stability_fn=lambda z: 0.0)
    with pytest.raises(ValueError):
        RobXConfig(alpha=0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(1, 12))
def test_geometric_containment(alpha, stop_after):
    base, anchor = np.array([0.1, 0.9, 0.3]), np.array([0.8, 0.2, 0.6])
    calls = {"n": 0}

    def stab(z):
        calls["n"] += 1
        return 1.0 if calls["n"] > stop_after else 0.0

    cfg = RobXConfig(alpha=alpha, c=1, max_steps=50)
    _, trace = robx(np.zeros(3), ConstantModel(0.9), None, _stub_base(base), cfg, anchors=[anchor],
                    stability_fn=stab)
    for k, z in enumerate(trace.iterates[0], start=1):
        assert np.allclose(z, anchor + (1 - alpha) ** k * (base - anchor), rtol=0, atol=1e-12)


@pytest.mark.parametrize("method", ["NN", "FT", "FOCUS", "FACE"])
def test_outputs_pass_stability_on_real_model(german, method):
    tr, te, model = german
    params = StabilityParams(K=300, tau=0.7)
    cfg = RobXConfig(stability=params)
    index = ConservativeIndex(model, tr, params)
    gen = make_generator(method, model, tr, GeneratorConfig())
    for x in te.X[model.predict(te.X) == 0][:5]:
        base = gen(x)
        if not base.found:
            continue
        res, trace = robx(x, model, tr, base, cfg, index=index)
        assert stability_test(res.cf, model, params)
        assert model.predict_proba(res.cf) > 0.5
