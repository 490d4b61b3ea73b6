import csv

import numpy as np
import pytest

from robustcf.cli import main
from robustcf.ensemble import load_model
from robustcf.experiment import ExperimentConfig, run_evaluation, synthetic_family_check

from conftest import random_dataset

FAST = {"n_estimators": "15", "max_depth": "3", "K": "100", "n_models": "3", "methods": "NN,FT,FOCUS,FACE",
        "max_queries": "8", "lof_k": "5", "tau": "0.6"}


@pytest.fixture()
def workspace(tmp_path):
    random_dataset(150, 3, seed=5).to_csv(tmp_path / "toy.csv")
    cfg = tmp_path / "run.cfg"
    lines = [f"dataset = {tmp_path / 'toy.csv'}", "recipe = csv", f"out_dir = {tmp_path / 'out'}"]
    lines += [f"{k} = {v}" for k, v in FAST.items()]
    cfg.write_text("# toy run\n" + "\n".join(lines) + "\n")
    return tmp_path, cfg


def _cfg(path, **over):
    return ExperimentConfig.load(path, {k: str(v) for k, v in over.items()})


def test_config_roundtrip(workspace):
    _, path = workspace
    cfg = _cfg(path)
    assert cfg.K == 100 and cfg.method_list == ["NN", "FT", "FOCUS", "FACE"]
    assert ExperimentConfig.parse(cfg.dumps()) == cfg
    with pytest.raises(ValueError, match="unknown config key"):
        ExperimentConfig.parse("nonsense = 1")
    with pytest.raises(ValueError):
        ExperimentConfig(methods="")
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="bogus")


def test_train_and_retrain(workspace, capsys):
    tmp, path = workspace
    assert main(["train", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "test accuracy" in out
    first = (tmp / "out" / "model.json").read_bytes()
    assert main(["train", "--config", str(path)]) == 0
    assert (tmp / "out" / "model.json").read_bytes() == first
    assert (tmp / "out" / "scaler.json").exists()
    assert "recipe = csv" in (tmp / "out" / "config.txt").read_text()

    assert main(["retrain", "--config", str(path)]) == 0
    assert len(list((tmp / "out" / "family").glob("model_*.json"))) == 3
    assert main(["retrain", "--config", str(path), "--set", "scenario=flip"]) == 0
    fam = list((tmp / "out" / "family").glob("model_*.json"))
    assert len(fam) == 1
    x = np.random.default_rng(0).random(3)
    base = load_model(tmp / "out" / "model.json")
    assert load_model(fam[0]).predict_proba(x) == pytest.approx(1 - base.predict_proba(x), abs=1e-12)


def test_errors_exit_nonzero(workspace, tmp_path, capsys):
    _, path = workspace
    assert main(["train", "--config", str(path), "--set", "dataset=/does/not/exist.csv"]) != 0
    assert main(["retrain", "--config", str(path), "--out-dir", str(tmp_path / "empty")]) != 0
    assert main(["evaluate", "--config", str(path), "--set", "scenario=nope"]) != 0
    assert "error:" in capsys.readouterr().err


def test_explain(workspace):
    tmp, path = workspace
    main(["train", "--config", str(path)])
    out = tmp / "out"
    cf = tmp / "cf.csv"
    assert main(["explain", "--config", str(path), "--model", str(out / "model.json"), "--data",
                 str(out / "train.csv"), "--queries", str(out / "test.csv"), "--method", "NN", "--out",
                 str(cf)]) == 0
    rows = list(csv.DictReader(open(cf)))
    assert len(rows) == 45
    model = load_model(out / "model.json")
    train = np.loadtxt(out / "train.csv", delimiter=",", skiprows=1)[:, :3]
    accepted = train[model.predict(train) == 1]
    for r in rows:
        x = np.array([float(r[n]) for n in ("f0", "f1", "f2")])
        if model.predict_proba(x) > 0.5:
            assert "skipped" in r["note"]
            continue
        cfv = np.array([float(r[f"cf_{n}"]) for n in ("f0", "f1", "f2")])
        d = np.abs(accepted - x).sum(axis=1)
        assert np.array_equal(cfv, accepted[np.argmin(d)])
        assert float(r["cost_l1"]) == pytest.approx(d.min(), abs=1e-12)
        assert r["lof_label"] in ("1", "-1")

    # a threshold every accepted point passes makes RobX return the base counterfactual
    cf2 = tmp / "cf_robx.csv"
    assert main(["explain", "--config", str(path), "--set", "tau=-1", "--model", str(out / "model.json"),
                 "--data", str(out / "train.csv"), "--queries", str(out / "test.csv"), "--method", "NN",
                 "--robx", "--out", str(cf2)]) == 0
    a, b = list(csv.reader(open(cf))), list(csv.reader(open(cf2)))
    for ra, rb in zip(a[1:], b[1:]):
        assert ra[4:7] == rb[4:7]


def test_evaluate_report(workspace):
    _, path = workspace
    report, _ = run_evaluation(_cfg(path), write=False)
    labels = [r.method for r in report.rows]
    for m in ("NN", "FT", "FOCUS", "FACE"):
        assert m in labels and m + "+RobX" in labels
    assert "CCF" in labels
    for r in report.rows:
        if r.n_found:
            assert 0 <= r.validity_pct <= 100


def test_original_family_full_validity(workspace):
    _, path = workspace
    report, _ = run_evaluation(_cfg(path, scenario="original"), write=False)
    assert report.n_models == 1
    assert all(r.validity_pct == 100.0 for r in report.rows if r.n_found)


def test_flip_family_zero_validity(workspace):
    _, path = workspace
    report, _ = run_evaluation(_cfg(path, scenario="flip"), write=False)
    assert all(r.validity_pct == 0.0 for r in report.rows if r.n_found)


def test_evaluate_deterministic_across_jobs(workspace, capsys):
    tmp, path = workspace
    assert main(["evaluate", "--config", str(path), "--out-dir", str(tmp / "a")]) == 0
    assert main(["evaluate", "--config", str(path), "--out-dir", str(tmp / "b"), "--set", "jobs=2"]) == 0
    for name in ("report.csv", "report.md", "counterfactuals.csv"):
        assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()
    assert (tmp / "a" / "timings.csv").exists()
    assert "| Method |" in capsys.readouterr().out


def test_tau_select_and_histogram(workspace, capsys):
    tmp, path = workspace
    main(["train", "--config", str(path)])
    out = tmp / "out"
    common = ["--model", str(out / "model.json"), "--data", str(out / "train.csv"), "--K", "100"]
    taus = []
    for q in ("0", "0.5", "1"):
        assert main(["tau-select", *common, "--quantile", q]) == 0
        taus.append(float(capsys.readouterr().out.strip().split("= ")[-1]))
    assert taus == sorted(taus)
    assert main(["stability-histogram", *common, "--out", str(tmp / "h.csv"), "--companions"]) == 0
    rows = list(csv.reader(open(tmp / "h.csv")))
    assert rows[0] == ["bin_left", "bin_right", "count"]
    assert float(rows[1][0]) == taus[0]
    assert (tmp / "h_neighborhood_mean.csv").exists()


def test_verify_theorems(workspace, capsys):
    _, path = workspace
    assert main(["verify-theorems", "--config", str(path), "--tau", "0.6", "--V", "0.1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS synthetic family V=0.0" in out


def test_synthetic_family_degenerate_and_failure(toy):
    data, model = toy
    acc = data.X[model.predict(data.X) == 1][:10]
    stab = np.full(len(acc), 0.55)
    zero = synthetic_family_check(model, acc, stab, 0.0, 0.7, 50)
    assert zero.invalidations == 0 and zero.assumptions_hold
    # stabilities no shift can exceed: construction must report failure, not pass
    bad = synthetic_family_check(model, acc, np.full(len(acc), 1.5), 0.1, 0.7, 50)
    assert not bad.assumptions_hold and not bad.passed
