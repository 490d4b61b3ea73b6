"""Conservative counterfactuals and the RobX refinement loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .generators import CounterfactualResult, lp_distances
from .stability import StabilityParams, stability, stability_batch


class NoBaseCounterfactual(RuntimeError):
    pass


class NoConservativeCounterfactual(RuntimeError):
    pass


@dataclass(frozen=True)
class RobXConfig:
    alpha: float = 0.2
    c: int = 3
    max_steps: int = 100
    stability: StabilityParams = StabilityParams()
    p: int = 1

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.c < 1 or self.max_steps < 1:
            raise ValueError("c and max_steps must be >= 1")
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")


class ConservativeIndex:
    """Dataset rows that the model accepts and that pass the stability test.

    Stability of every accepted row is computed once; lookups are then a
    distance scan over the stable subset.
    """

    def __init__(self, model, data, params: StabilityParams, scores: Optional[np.ndarray] = None):
        X = np.asarray(data.X if hasattr(data, "X") else data, dtype=np.float64)
        self.params = params
        self.X = X
        outputs = np.asarray(model.predict_proba(X)) if len(X) else np.empty(0)
        self.accepted_rows = np.flatnonzero(outputs > 0.5)
        if scores is None:
            scores = stability_batch(X[self.accepted_rows], model, params)
        self.accepted_scores = np.asarray(scores, dtype=np.float64)
        keep = self.accepted_scores >= params.tau
        self.rows = self.accepted_rows[keep]
        self.scores = self.accepted_scores[keep]

    def with_tau(self, tau: float) -> "ConservativeIndex":
        """Same cached scores, different threshold."""
        clone = object.__new__(ConservativeIndex)
        clone.params = StabilityParams(self.params.K, self.params.sigma, tau, self.params.seed)
        clone.X = self.X
        clone.accepted_rows = self.accepted_rows
        clone.accepted_scores = self.accepted_scores
        keep = self.accepted_scores >= tau
        clone.rows = self.accepted_rows[keep]
        clone.scores = self.accepted_scores[keep]
        return clone

    def nearest(self, x, p: int, count: int, unique: bool = False) -> np.ndarray:
        """Row ids of the ``count`` closest stable rows (ties by row id)."""
        if self.rows.size == 0:
            return self.rows
        dist = lp_distances(self.X[self.rows], np.asarray(x, dtype=np.float64), p)
        order = self.rows[np.argsort(dist, kind="stable")]
        if not unique:
            return order[:count]
        picked, seen = [], set()
        for r in order:
            key = self.X[r].tobytes()
            if key in seen:
                continue
            seen.add(key)
            picked.append(r)
            if len(picked) == count:
                break
        return np.asarray(picked, dtype=np.int64)


def conservative_counterfactual(x, model, data, stability_params: StabilityParams, p: int = 1,
                                count: int = 1, index: Optional[ConservativeIndex] = None):
    """Up to ``count`` nearest dataset points that are accepted and stable.

    An empty list means no conservative counterfactual exists at this threshold.
    """
    x = np.asarray(x, dtype=np.float64)
    if model.predict_proba(x) > 0.5:
        raise ValueError("query is already accepted by the model")
    if index is None:
        index = ConservativeIndex(model, data, stability_params)
    return [index.X[r].copy() for r in index.nearest(x, p, count)]


def ccf_result(x, model, index: ConservativeIndex, p: int) -> CounterfactualResult:
    """Single closest conservative counterfactual as a ``CounterfactualResult``."""
    x = np.asarray(x, dtype=np.float64)
    rows = index.nearest(x, p, 1)
    if rows.size == 0:
        return CounterfactualResult(x, None, "CCF", p=p)
    cf = index.X[rows[0]].copy()
    return CounterfactualResult(x, cf, "CCF", float(np.linalg.norm(x - cf, ord=p)),
                                float(model.predict_proba(cf)), p, {"row": int(rows[0])})


@dataclass
class RobXTrace:
    base_cf: np.ndarray
    anchors: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    fell_back: list = field(default_factory=list)
    chosen: Optional[int] = None
    final_stability: float = float("nan")
    early_exit: bool = False


def robx(x, model, data, base, cfg: RobXConfig, *, index: Optional[ConservativeIndex] = None,
         anchors=None, stability_fn: Optional[Callable] = None):
    """Refine a base counterfactual until it passes the stability test.

    ``base`` is either a generator (called on ``x``) or a precomputed
    ``CounterfactualResult``. ``anchors`` overrides the conservative anchor
    lookup and ``stability_fn`` the stability score; both exist for testing.
    Returns ``(CounterfactualResult, RobXTrace)``.
    """
    x = np.asarray(x, dtype=np.float64)
    base_res = base if isinstance(base, CounterfactualResult) else base(x)
    if not base_res.found:
        raise NoBaseCounterfactual("no base counterfactual")
    tau = cfg.stability.tau
    score = stability_fn or (lambda z: stability(z, model, cfg.stability))

    def passes(z):
        s = score(z)
        return s >= tau and model.predict_proba(z) > 0.5, s

    start = np.asarray(base_res.cf, dtype=np.float64)
    trace = RobXTrace(base_cf=start.copy())
    ok, s = passes(start)
    if ok:
        trace.early_exit, trace.final_stability = True, s
        return _wrap(x, start, base_res, model, cfg), trace

    if anchors is None:
        if index is None:
            index = ConservativeIndex(model, data, cfg.stability)
        anchors = [index.X[r] for r in index.nearest(start, cfg.p, cfg.c, unique=True)]
    anchors = [np.asarray(a, dtype=np.float64) for a in anchors]
    if not anchors:
        raise NoConservativeCounterfactual(f"no conservative counterfactual under tau={tau}")
    trace.anchors = anchors

    finals, final_scores = [], []
    for anchor in anchors:
        z = start.copy()
        path = []
        for _ in range(cfg.max_steps):
            z = cfg.alpha * anchor + (1.0 - cfg.alpha) * z
            path.append(z.copy())
            ok, s = passes(z)
            if ok:
                trace.fell_back.append(False)
                break
        else:
            z = anchor.copy()
            s = score(z)
            path.append(z.copy())
            trace.fell_back.append(True)
        trace.iterates.append(path)
        finals.append(z)
        final_scores.append(s)

    costs = [np.linalg.norm(x - z, ord=cfg.p) for z in finals]
    best = int(np.argmin(costs))
    trace.chosen = best
    trace.final_stability = float(final_scores[best])
    return _wrap(x, finals[best], base_res, model, cfg), trace


def _wrap(x, cf, base_res, model, cfg):
    return CounterfactualResult(x, cf.copy(), f"{base_res.method}+RobX",
                                float(np.linalg.norm(x - cf, ord=cfg.p)),
                                float(model.predict_proba(cf)), cfg.p)
