"""Retraining-based evaluation protocol and its flat ``key = value`` config."""

from __future__ import annotations

import csv
import io
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import JITTERS, Dataset, ScenarioSpec, half_split, load_recipe, make_scenarios, split
from .ensemble import TrainConfig, TreeEnsemble, flip_model, train
from .generators import METHODS, GeneratorConfig, make_generator
from .metrics import LofIndex, LofParams, cantelli_bound, stability_histogram, validity
from .robx import (ConservativeIndex, NoBaseCounterfactual, NoConservativeCounterfactual,
                   RobXConfig, ccf_result, robx)
from .stability import StabilityParams, stability

SCENARIOS = ("drop_k", "hyperparam_jitter", "half_split", "flip", "original")

# recipe -> tau used when neither tau nor tau_quantile is given
DEFAULT_TAU = {"german": 0.93, "heloc": 0.65}


@dataclass
class ExperimentConfig:
    dataset: str = "data/german.data"
    recipe: str = "german"
    label_column: str = "label"
    test_fraction: float = 0.3
    seed: int = 0
    # retraining scenario
    scenario: str = "drop_k"
    k: int = 1
    n_models: int = 20
    jitter: str = ",".join(JITTERS)
    # base model
    n_estimators: int = 100
    max_depth: int = 4
    learning_rate: float = 0.3
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    # counterfactual generation
    methods: str = "NN,FT,FOCUS,FACE"
    gammas: str = "0.5"
    p: int = 1
    ft_epsilon: float = 0.01
    focus_steepness: float = 5.0
    focus_dist_weight: float = 0.1
    focus_step_size: float = 0.05
    focus_max_iters: int = 1000
    focus_hinge_slack: float = 0.05
    face_edge_quantile: float = 0.95
    # stability and RobX
    K: int = 1000
    sigma: float = 0.1
    tau: Optional[float] = None
    tau_quantile: Optional[float] = None
    alpha: float = 0.2
    c: int = 3
    max_steps: int = 100
    # realism
    lof_k: int = 20
    lof_threshold: float = 1.5
    # execution
    out_dir: str = "runs/default"
    jobs: int = 1
    max_queries: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        bad = [m for m in self.method_list if m not in METHODS]
        if bad or not self.method_list:
            raise ValueError(f"unknown or empty methods {bad or self.methods!r}")
        if self.tau_quantile is not None and not 0 <= self.tau_quantile <= 1:
            raise ValueError("tau_quantile must lie in [0, 1]")

    @property
    def method_list(self) -> list[str]:
        return [m.strip().upper() for m in self.methods.split(",") if m.strip()]

    @property
    def gamma_list(self) -> list[float]:
        return [float(g) for g in self.gammas.split(",") if g.strip()]

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.n_estimators, self.max_depth, self.learning_rate,
                           self.min_child_weight, self.reg_lambda, self.seed)

    def scenario_spec(self) -> ScenarioSpec:
        kind = self.scenario if self.scenario in ("drop_k", "hyperparam_jitter", "half_split") else "drop_k"
        jit = tuple(j.strip() for j in self.jitter.split(",") if j.strip())
        return ScenarioSpec(kind, self.k, jit, self.n_models, self.seed)

    def generator_config(self, gamma: float) -> GeneratorConfig:
        return GeneratorConfig(p=self.p, gamma=gamma, epsilon=self.ft_epsilon,
                               steepness=self.focus_steepness, dist_weight=self.focus_dist_weight,
                               step_size=self.focus_step_size, max_iters=self.focus_max_iters,
                               hinge_slack=self.focus_hinge_slack,
                               edge_quantile=self.face_edge_quantile)

    def stability_params(self, tau: float) -> StabilityParams:
        return StabilityParams(self.K, self.sigma, tau, self.seed)

    def robx_config(self, tau: float) -> RobXConfig:
        return RobXConfig(self.alpha, self.c, self.max_steps, self.stability_params(tau), self.p)

    def lof_params(self) -> LofParams:
        return LofParams(self.lof_k, self.lof_threshold)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, overrides: Optional[dict] = None) -> "ExperimentConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        raw.update(overrides or {})
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(types[key], value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(), overrides)


def _coerce(type_name, value):
    if not isinstance(value, str):
        return value
    t = str(type_name)
    if "Optional" in t:
        if value == "" or value.lower() == "none":
            return None
        t = t.replace("Optional[", "").rstrip("]")
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    return value


# --------------------------------------------------------------------------
# setup shared by the subcommands


@dataclass
class Setup:
    cfg: ExperimentConfig
    data: Dataset
    train: Dataset
    test: Dataset
    reference: Dataset  # the data the original model was fit on
    model: TreeEnsemble


def prepare(cfg: ExperimentConfig, model: Optional[TreeEnsemble] = None) -> Setup:
    data = load_recipe(cfg.recipe, cfg.dataset, cfg.label_column)
    tr, te = split(data, cfg.test_fraction, cfg.seed)
    reference = half_split(tr, cfg.seed)[0] if cfg.scenario == "half_split" else tr
    if model is None:
        model = train(reference, cfg.train_config())
    return Setup(cfg, data, tr, te, reference, model)


def build_family(setup: Setup) -> list[TreeEnsemble]:
    cfg = setup.cfg
    if cfg.scenario == "flip":
        return [flip_model(setup.model)]
    if cfg.scenario == "original":
        return [setup.model]
    pairs = make_scenarios(setup.train, cfg.train_config(), cfg.scenario_spec())
    return [train(ds, tc) for ds, tc in pairs]


def resolve_tau(setup: Setup) -> float:
    cfg = setup.cfg
    if cfg.tau_quantile is not None:
        hist = stability_histogram(setup.reference, setup.model, cfg.stability_params(0.5),
                                   companions=False)
        return hist.quantile(cfg.tau_quantile)
    if cfg.tau is not None:
        return cfg.tau
    return DEFAULT_TAU.get(cfg.recipe, 0.65)


def rejected_queries(setup: Setup) -> np.ndarray:
    out = np.asarray(setup.model.predict_proba(setup.test.X))
    rows = np.flatnonzero(out <= 0.5)
    if setup.cfg.max_queries:
        rows = rows[: setup.cfg.max_queries]
    return rows


# --------------------------------------------------------------------------
# evaluation


@dataclass
class QueryOutcome:
    query_id: int
    label: str  # e.g. "FT", "FT+RobX", "CCF", with gamma suffix when not 0.5
    cf: Optional[np.ndarray]
    note: str = ""


_CTX: dict = {}


def _explain_chunk(query_ids):
    ctx = _CTX
    setup, tau = ctx["setup"], ctx["tau"]
    cfg = setup.cfg
    index, gens = ctx["index"], ctx["generators"]
    rcfg = cfg.robx_config(tau)
    out = []
    for qid in query_ids:
        x = setup.test.X[qid]
        ccf = ccf_result(x, setup.model, index, cfg.p)
        out.append(QueryOutcome(qid, "CCF", ccf.cf, "" if ccf.found else "no conservative counterfactual"))
        for (method, gamma), gen in gens.items():
            label = method if gamma == 0.5 else f"{method}(gamma={gamma:g})"
            res = gen(x)
            out.append(QueryOutcome(qid, label, res.cf, "" if res.found else "not found"))
            try:
                r, _ = robx(x, setup.model, setup.reference, res, rcfg, index=index)
                out.append(QueryOutcome(qid, label + "+RobX", r.cf))
            except NoBaseCounterfactual:
                out.append(QueryOutcome(qid, label + "+RobX", None, "no base counterfactual"))
            except NoConservativeCounterfactual:
                out.append(QueryOutcome(qid, label + "+RobX", None, "no conservative counterfactual"))
    return out


def explain_queries(setup: Setup, query_ids, tau: float, index: ConservativeIndex, jobs: int = 1):
    cfg = setup.cfg
    gens = {}
    for gamma in cfg.gamma_list:
        gcfg = cfg.generator_config(gamma)
        for method in cfg.method_list:
            gens[(method, gamma)] = make_generator(method, setup.model, setup.reference, gcfg)
    _CTX.update(setup=setup, tau=tau, index=index, generators=gens)
    query_ids = [int(q) for q in query_ids]
    try:
        if jobs <= 1 or len(query_ids) < 2:
            return _explain_chunk(query_ids)
        chunks = [query_ids[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(jobs, mp_context=mp.get_context("fork")) as pool:
            parts = list(pool.map(_explain_chunk, chunks))
        merged = [o for part in parts for o in part]
        order = {q: i for i, q in enumerate(query_ids)}
        # stable sort keeps the per-query label order produced by each worker
        return sorted(merged, key=lambda o: order[o.query_id])
    finally:
        _CTX.clear()


@dataclass
class ReportRow:
    method: str
    n_queries: int
    n_found: int
    mean_cost: float
    validity_pct: float
    mean_lof: float

    @property
    def success_rate(self) -> float:
        return self.n_found / self.n_queries if self.n_queries else float("nan")


@dataclass
class ExperimentReport:
    dataset: str
    scenario: str
    p: int
    tau: float
    n_models: int
    rows: list
    timings: dict

    def row(self, method: str) -> ReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "scenario", "p", "tau", "n_models", "method", "n_queries", "n_found",
                    "success_rate", "mean_cost", "validity_pct", "mean_lof"])
        for r in self.rows:
            w.writerow([self.dataset, self.scenario, self.p, repr(self.tau), self.n_models, r.method,
                        r.n_queries, r.n_found, repr(r.success_rate), repr(r.mean_cost),
                        repr(r.validity_pct), repr(r.mean_lof)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"**{self.dataset}**, scenario `{self.scenario}`, L{self.p} cost, tau={self.tau:.4f}, "
                 f"{self.n_models} retrained model(s)", "",
                 "| Method | Cost | Val. | LOF | Found |", "|---|---|---|---|---|"]
        for r in self.rows:
            shown = r.method if "+RobX" not in r.method else "+RobX"
            lines.append(f"| {shown} | {r.mean_cost:.2f} | {r.validity_pct:.1f}% | {r.mean_lof:.2f} | "
                         f"{r.n_found}/{r.n_queries} |")
        return "\n".join(lines) + "\n"


def summarize(outcomes, family, lof_index: LofIndex, query_x, p: int):
    labels = []
    for o in outcomes:
        if o.label not in labels:
            labels.append(o.label)
    rows = []
    for label in labels:
        group = [o for o in outcomes if o.label == label]
        found = [o for o in group if o.cf is not None]
        if found:
            cfs = np.array([o.cf for o in found])
            costs = [np.linalg.norm(query_x[o.query_id] - o.cf, ord=p) for o in found]
            rows.append(ReportRow(label, len(group), len(found), float(np.mean(costs)),
                                  100.0 * validity(cfs, family),
                                  float(np.mean([lof_index.label(c) for c in cfs]))))
        else:
            rows.append(ReportRow(label, len(group), 0, float("nan"), float("nan"), float("nan")))
    return rows


def run_evaluation(cfg: ExperimentConfig, write: bool = True):
    """Run the full protocol; returns ``(report, outcomes)``."""
    timings = {}
    t0 = time.perf_counter()
    setup = prepare(cfg)
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    family = build_family(setup)
    timings["retrain"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tau = resolve_tau(setup)
    index = ConservativeIndex(setup.model, setup.reference, cfg.stability_params(tau))
    lof_index = LofIndex(setup.reference.X, cfg.lof_params())
    timings["index"] = time.perf_counter() - t0

    queries = rejected_queries(setup)
    if queries.size == 0:
        raise ValueError("the model rejects no test point; nothing to explain")
    t0 = time.perf_counter()
    outcomes = explain_queries(setup, queries, tau, index, cfg.jobs)
    timings["explain"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rows = summarize(outcomes, family, lof_index, setup.test.X, cfg.p)
    timings["metrics"] = time.perf_counter() - t0

    name = Path(cfg.dataset).name if cfg.recipe == "csv" else cfg.recipe
    report = ExperimentReport(name, cfg.scenario, cfg.p, tau, len(family), rows, timings)
    if write:
        write_outputs(cfg, setup, report, outcomes, tau, lof_index)
    return report, outcomes


def counterfactual_rows(setup: Setup, outcomes, tau: float, lof_index: LofIndex):
    cfg = setup.cfg
    names = setup.data.feature_names
    header = ["query_id", *names, *[f"cf_{n}" for n in names], "method", "cost_l1", "cost_l2",
              "stability", "lof_label", "note"]
    rows = [header]
    sp = cfg.stability_params(tau)
    for o in outcomes:
        x = setup.test.X[o.query_id]
        if o.cf is None:
            rows.append([o.query_id, *map(repr, x.tolist()), *[""] * len(names), o.label, "", "", "", "",
                         o.note])
            continue
        rows.append([o.query_id, *map(repr, x.tolist()), *map(repr, o.cf.tolist()), o.label,
                     repr(float(np.abs(x - o.cf).sum())), repr(float(np.linalg.norm(x - o.cf))),
                     repr(stability(o.cf, setup.model, sp)), lof_index.label(o.cf), o.note])
    return rows


def write_outputs(cfg, setup, report, outcomes, tau, lof_index):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.md").write_text(report.to_markdown())
    with open(out / "counterfactuals.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(counterfactual_rows(setup, outcomes, tau, lof_index))
    # wall-clock numbers live apart from the report so reports stay byte-identical
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "seconds"])
        for k, v in report.timings.items():
            w.writerow([k, f"{v:.3f}"])


# --------------------------------------------------------------------------
# guarantee checks


def flip_check(setup: Setup, tau: float, index: ConservativeIndex) -> dict:
    """Validity of every generated counterfactual under the flipped model."""
    flipped = [flip_model(setup.model)]
    outcomes = explain_queries(setup, rejected_queries(setup), tau, index)
    result = {}
    for label in dict.fromkeys(o.label for o in outcomes):
        cfs = [o.cf for o in outcomes if o.label == label and o.cf is not None]
        result[label] = validity(np.array(cfs), flipped) if cfs else float("nan")
    return result


@dataclass
class SyntheticFamilyCheck:
    V: float
    tau: float
    n_models: int
    n_points: int
    invalidations: int
    pairs: int
    shift_mean: float
    shift_scale: float
    max_std: float
    min_mean_gap: float

    @property
    def rate(self) -> float:
        return self.invalidations / self.pairs if self.pairs else 0.0

    @property
    def bound(self) -> float:
        return cantelli_bound(self.V, self.tau)

    @property
    def standard_error(self) -> float:
        b = self.bound
        return float(np.sqrt(b * (1 - b) / self.pairs)) if self.pairs else 0.0

    @property
    def assumptions_hold(self) -> bool:
        return self.max_std <= self.V + 1e-12 and self.min_mean_gap > 0

    @property
    def passed(self) -> bool:
        return self.assumptions_hold and self.rate <= self.bound + 3 * self.standard_error


def _standard_shocks(n: int, rng, kind: str, downside_prob: float = 0.1):
    if kind == "gaussian":
        z = rng.standard_normal(n)
    elif kind == "two_point":
        # mean 0, variance 1, heavy downside
        pi = downside_prob
        z = np.where(rng.random(n) < pi, -np.sqrt((1 - pi) / pi), np.sqrt(pi / (1 - pi)))
    else:
        raise ValueError(f"unknown shock kind {kind!r}")
    return z - z.mean()


def synthetic_family_check(model: TreeEnsemble, points, stabilities, V: float, tau: float,
                           n_models: int = 200, seed: int = 0, kind: str = "two_point") -> SyntheticFamilyCheck:
    """Empirical check of the conservative-counterfactual invalidation bound.

    The family shifts every leaf margin of the model by a per-model amount
    ``mu + s * z_j``. ``s`` is set so the largest standard deviation of the new
    outputs over ``points`` equals ``V``; ``mu >= 0`` is the smallest shift that
    makes each point's mean new output exceed its stability score. Both
    assumptions are then verified on the realized family.
    """
    points = np.asarray(points, dtype=np.float64)
    stabilities = np.asarray(stabilities, dtype=np.float64)
    margins = np.asarray(model.predict_margin(points))
    z = _standard_shocks(n_models, np.random.default_rng(seed), kind)

    def outputs(mu, s):
        return 1.0 / (1.0 + np.exp(-(margins[None, :] + mu + s * z[:, None])))

    def fit_scale(mu):
        if V == 0:
            return 0.0
        lo, hi = 0.0, 1.0
        while outputs(mu, hi).std(axis=0).max() < V and hi < 1e6:
            hi *= 2
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if outputs(mu, mid).std(axis=0).max() <= V:
                lo = mid
            else:
                hi = mid
        return lo

    mu, s = 0.0, fit_scale(0.0)
    for _ in range(200):
        Z = outputs(mu, s)
        if (Z.mean(axis=0) - stabilities).min() > 0:
            break
        mu += 0.05
        s = fit_scale(mu)
    Z = outputs(mu, s)
    invalid = int((Z <= 0.5).sum())
    return SyntheticFamilyCheck(V, tau, n_models, len(points), invalid, Z.size, mu, s,
                                float(Z.std(axis=0).max()), float((Z.mean(axis=0) - stabilities).min()))
