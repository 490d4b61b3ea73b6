"""Base counterfactual generators: NN, feature tweaking, FOCUS and FACE.

Each generator is a callable object built once per (model, data, config) and
then applied to individual queries. The module-level ``*_counterfactual``
functions are one-shot conveniences around them.

Every method targets the acceptance rule ``M(x') > gamma`` and returns a
``CounterfactualResult`` whose ``cf`` is ``None`` when nothing was found.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from scipy.special import expit

from .ensemble import TreeEnsemble

METHODS = ("NN", "FT", "FOCUS", "FACE")
FACE_MAX_POINTS = 20000


@dataclass(frozen=True)
class GeneratorConfig:
    p: int = 1
    gamma: float = 0.5
    # feature tweaking
    epsilon: float = 0.01
    # FOCUS
    steepness: float = 5.0
    dist_weight: float = 0.1
    step_size: float = 0.05
    max_iters: int = 1000
    hinge_slack: float = 0.05
    # FACE
    edge_quantile: float = 0.95
    edge_radius: Optional[float] = None
    max_path_len: Optional[int] = None

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if not 0.5 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0.5, 1)")
        if self.epsilon <= 0 or self.steepness <= 0 or self.dist_weight <= 0 or self.step_size <= 0:
            raise ValueError("epsilon, steepness, dist_weight and step_size must be > 0")
        if not 0 < self.edge_quantile < 1:
            raise ValueError("edge_quantile must lie in (0, 1)")


@dataclass
class CounterfactualResult:
    query: np.ndarray
    cf: Optional[np.ndarray]
    method: str
    cost: float = float("nan")
    model_output: float = float("nan")
    p: int = 1
    extra: dict = field(default_factory=dict)

    @property
    def found(self) -> bool:
        return self.cf is not None


def _result(x, cf, method, model, cfg, **extra):
    if cf is None:
        return CounterfactualResult(x, None, method, p=cfg.p, extra=extra)
    cf = np.asarray(cf, dtype=np.float64)
    return CounterfactualResult(x, cf, method, float(np.linalg.norm(x - cf, ord=cfg.p)),
                                float(model.predict_proba(cf)), cfg.p, extra)


def _check_query(x, model, gamma):
    x = np.asarray(x, dtype=np.float64)
    out = model.predict_proba(x)
    if out > gamma:
        raise ValueError(f"query is already accepted (M(x)={out:.4f} > {gamma})")
    return x


def lp_distances(X, x, p):
    diff = np.abs(X - x)
    return diff.sum(axis=1) if p == 1 else np.sqrt((diff * diff).sum(axis=1))


class NNGenerator:
    """Closest dataset point accepted by the model (lowest row index on ties)."""

    method = "NN"

    def __init__(self, model: TreeEnsemble, data, cfg: GeneratorConfig = GeneratorConfig()):
        self.model, self.cfg = model, cfg
        X = np.asarray(data.X if hasattr(data, "X") else data, dtype=np.float64)
        if X.shape[0] == 0:
            raise ValueError("empty dataset")
        self.X = X
        self.outputs = np.asarray(model.predict_proba(X))
        self.accepted = np.flatnonzero(self.outputs > cfg.gamma)

    def __call__(self, x) -> CounterfactualResult:
        x = _check_query(x, self.model, self.cfg.gamma)
        if self.accepted.size == 0:
            return _result(x, None, self.method, self.model, self.cfg)
        dist = lp_distances(self.X[self.accepted], x, self.cfg.p)
        j = int(self.accepted[np.argmin(dist)])
        return _result(x, self.X[j], self.method, self.model, self.cfg, row=j)


class FTGenerator:
    """Feature tweaking: move ``x`` into each positive leaf's box, keep the cheapest valid move."""

    method = "FT"

    def __init__(self, model: TreeEnsemble, cfg: GeneratorConfig = GeneratorConfig()):
        self.model, self.cfg = model, cfg
        d = model.n_features
        lo, hi, target = [], [], []
        for t, tree in enumerate(model.trees):
            for leaf, path in tree.leaf_paths():
                if leaf.weight <= 0:
                    continue
                a, b = np.full(d, -np.inf), np.full(d, np.inf)
                for f, thr, goes_left in path:
                    if goes_left:
                        b[f] = min(b[f], thr)
                    else:
                        a[f] = max(a[f], thr)
                lo.append(a)
                hi.append(b)
                target.append((t, leaf.id))
        self.lo = np.array(lo).reshape(-1, d)
        self.hi = np.array(hi).reshape(-1, d)
        self.target = target

    def candidates(self, x):
        """One minimally tweaked copy of ``x`` per positive leaf."""
        eps = self.cfg.epsilon
        lo, hi = self.lo, self.hi
        cand = np.broadcast_to(x, lo.shape).copy()
        with np.errstate(invalid="ignore"):
            mid = 0.5 * (lo + hi)
            below = cand < lo
            up = np.where(lo + eps < hi, lo + eps, mid)
            cand = np.where(below, up, cand)
            above = cand >= hi
            down = np.where(hi - eps >= lo, hi - eps, mid)
            cand = np.where(above, down, cand)
        return cand

    def __call__(self, x) -> CounterfactualResult:
        x = _check_query(x, self.model, self.cfg.gamma)
        if not self.target:
            return _result(x, None, self.method, self.model, self.cfg)
        cand = self.candidates(x)
        ok = np.asarray(self.model.predict_proba(cand)) > self.cfg.gamma
        if not ok.any():
            return _result(x, None, self.method, self.model, self.cfg)
        idx = np.flatnonzero(ok)
        j = int(idx[np.argmin(lp_distances(cand[idx], x, self.cfg.p))])
        return _result(x, cand[j], self.method, self.model, self.cfg, target=self.target[j])


class SmoothedEnsemble:
    """Sigmoid relaxation of an ensemble: each split routes left with weight
    ``sigmoid(s * (threshold - x[feature]))``."""

    def __init__(self, model: TreeEnsemble, steepness: float):
        self.s = float(steepness)
        self.base = model.base_margin
        self.d = model.n_features
        paths, weights = [], []
        for tree in model.trees:
            for leaf, path in tree.leaf_paths():
                paths.append(path)
                weights.append(leaf.weight)
        depth = max((len(p) for p in paths), default=0)
        P = len(paths)
        self.feat = np.zeros((P, depth), dtype=np.int64)
        self.thr = np.zeros((P, depth))
        self.sgn = np.zeros((P, depth))
        for i, path in enumerate(paths):
            for j, (f, thr, goes_left) in enumerate(path):
                self.feat[i, j] = f
                self.thr[i, j] = thr
                self.sgn[i, j] = 1.0 if goes_left else -1.0
        self.mask = self.sgn != 0
        self.w = np.asarray(weights, dtype=np.float64)

    def _edges(self, x):
        a = self.sgn * self.s * (self.thr - x[self.feat])
        prob = np.where(self.mask, expit(a), 1.0)
        return a, prob

    def margin(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        _, prob = self._edges(x)
        return float(self.base + np.dot(self.w, prob.prod(axis=1)))

    def margin_and_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        a, prob = self._edges(x)
        leaf = prob.prod(axis=1)
        # d/dx_f log sigmoid(sgn*s*(thr - x_f)) = -sgn*s*(1 - sigmoid(.))
        dlog = np.where(self.mask, -self.sgn * self.s * expit(-a), 0.0)
        contrib = (self.w * leaf)[:, None] * dlog
        grad = np.bincount(self.feat.ravel(), weights=contrib.ravel(), minlength=self.d)
        return float(self.base + np.dot(self.w, leaf)), grad


class FocusGenerator:
    """Gradient descent on a hinge loss over the smoothed ensemble plus an L_p penalty."""

    method = "FOCUS"

    def __init__(self, model: TreeEnsemble, cfg: GeneratorConfig = GeneratorConfig()):
        self.model, self.cfg = model, cfg
        self.smooth = SmoothedEnsemble(model, cfg.steepness)

    def loss_and_grad(self, z, x, exact_rejects=False):
        cfg = self.cfg
        m, g = self.smooth.margin_and_grad(z)
        prob = expit(m)
        hinge = cfg.gamma + cfg.hinge_slack - prob
        loss, grad = 0.0, np.zeros_like(z)
        # the proxy can overshoot the exact ensemble; keep pushing while the
        # exact model still rejects
        if hinge > 0 or exact_rejects:
            loss += hinge
            grad -= prob * (1.0 - prob) * g
        diff = z - x
        if cfg.p == 1:
            loss += cfg.dist_weight * np.abs(diff).sum()
            grad += cfg.dist_weight * np.sign(diff)
        else:
            norm = np.linalg.norm(diff)
            loss += cfg.dist_weight * norm
            if norm > 0:
                grad += cfg.dist_weight * diff / norm
        return loss, grad

    def __call__(self, x) -> CounterfactualResult:
        x = _check_query(x, self.model, self.cfg.gamma)
        z = x.copy()
        for it in range(1, self.cfg.max_iters + 1):
            _, grad = self.loss_and_grad(z, x, exact_rejects=True)
            z = z - self.cfg.step_size * grad
            if self.model.predict_proba(z) > self.cfg.gamma:
                return _result(x, z, self.method, self.model, self.cfg, iterations=it)
        return _result(x, None, self.method, self.model, self.cfg, iterations=self.cfg.max_iters)


class FaceGenerator:
    """Shortest path on an epsilon-graph over the dataset to an accepted point."""

    method = "FACE"

    def __init__(self, model: TreeEnsemble, data, cfg: GeneratorConfig = GeneratorConfig()):
        self.model, self.cfg = model, cfg
        X = np.asarray(data.X if hasattr(data, "X") else data, dtype=np.float64)
        n = X.shape[0]
        if n == 0:
            raise ValueError("empty dataset")
        if n > FACE_MAX_POINTS:
            raise ValueError(f"FACE graph on n={n} > {FACE_MAX_POINTS} points refused")
        self.X = X
        self.kdtree = cKDTree(X)
        if cfg.edge_radius is not None:
            self.radius = float(cfg.edge_radius)
        elif n > 1:
            nn_dist, _ = self.kdtree.query(X, k=2, p=cfg.p)
            self.radius = float(np.quantile(nn_dist[:, 1], cfg.edge_quantile))
        else:
            self.radius = 0.0
        pairs = self.kdtree.query_pairs(self.radius, p=cfg.p, output_type="ndarray")
        i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.empty(0, int), np.empty(0, int))
        # zero-length edges would vanish from the sparse graph
        w = np.maximum(lp_distances(X[i], X[j], cfg.p), 1e-12)
        self._rows = np.concatenate([i, j])
        self._cols = np.concatenate([j, i])
        self._w = np.concatenate([w, w])
        self.outputs = np.asarray(model.predict_proba(X))
        self.accepted = self.outputs > cfg.gamma

    def __call__(self, x) -> CounterfactualResult:
        x = _check_query(x, self.model, self.cfg.gamma)
        n = self.X.shape[0]
        near = np.asarray(self.kdtree.query_ball_point(x, self.radius, p=self.cfg.p), dtype=np.int64)
        near.sort()
        if near.size == 0:
            return _result(x, None, self.method, self.model, self.cfg, path=[])
        w = np.maximum(lp_distances(self.X[near], x, self.cfg.p), 1e-12)
        rows = np.concatenate([self._rows, np.full(near.size, n), near])
        cols = np.concatenate([self._cols, near, np.full(near.size, n)])
        data = np.concatenate([self._w, w, w])
        graph = csr_matrix(coo_matrix((data, (rows, cols)), shape=(n + 1, n + 1)))
        dist, pred = dijkstra(graph, directed=False, indices=n, return_predecessors=True)
        dist = dist[:n]
        ok = self.accepted & np.isfinite(dist)
        if self.cfg.max_path_len is not None:
            hops = np.array([self._hops(pred, j, n) if ok[j] else 0 for j in range(n)])
            ok &= hops <= self.cfg.max_path_len
        if not ok.any():
            return _result(x, None, self.method, self.model, self.cfg, path=[])
        cand = np.flatnonzero(ok)
        j = int(cand[np.argmin(dist[cand])])
        path = self._path(pred, j, n)
        return _result(x, self.X[j], self.method, self.model, self.cfg, row=j, path=path,
                       path_length=float(dist[j]))

    @staticmethod
    def _path(pred, j, source):
        path = [j]
        while path[-1] != source:
            path.append(int(pred[path[-1]]))
        return path[::-1]

    def _hops(self, pred, j, source):
        return len(self._path(pred, j, source)) - 1


def make_generator(method: str, model: TreeEnsemble, data, cfg: GeneratorConfig):
    method = method.upper()
    if method == "NN":
        return NNGenerator(model, data, cfg)
    if method == "FT":
        return FTGenerator(model, cfg)
    if method == "FOCUS":
        return FocusGenerator(model, cfg)
    if method == "FACE":
        return FaceGenerator(model, data, cfg)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def nn_counterfactual(x, model, data, cfg: GeneratorConfig = GeneratorConfig()):
    return NNGenerator(model, data, cfg)(x)


def ft_counterfactual(x, model, cfg: GeneratorConfig = GeneratorConfig()):
    return FTGenerator(model, cfg)(x)


def focus_counterfactual(x, model, cfg: GeneratorConfig = GeneratorConfig()):
    return FocusGenerator(model, cfg)(x)


def face_counterfactual(x, model, data, cfg: GeneratorConfig = GeneratorConfig()):
    return FaceGenerator(model, data, cfg)(x)
