"""Evaluation metrics: local outlier factor, validity, cost and the invalidation bound."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .stability import StabilityParams, neighborhood_mean, stability_batch


@dataclass(frozen=True)
class LofParams:
    k: int = 20
    inlier_threshold: float = 1.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.inlier_threshold < 1:
            raise ValueError("inlier_threshold must be >= 1")


class LofIndex:
    """Exact k-LOF against a fixed reference set with Euclidean distance.

    Neighbors are the ``k`` closest rows, ties broken by row index. A query
    equal to a reference row is treated as that row (it is not its own
    neighbor).
    """

    def __init__(self, X, params: LofParams = LofParams(), chunk: int = 1024):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.params = params
        n, k = self.X.shape[0], params.k
        if n <= k:
            raise ValueError(f"LOF needs more than k={k} reference points, got {n}")
        nbrs = np.empty((n, k), dtype=np.int64)
        nd = np.empty((n, k))
        for start in range(0, n, chunk):
            D = cdist(self.X[start:start + chunk], self.X)
            rows = np.arange(D.shape[0])
            D[rows, start + rows] = np.inf
            idx = np.argsort(D, axis=1, kind="stable")[:, :k]
            nbrs[start:start + chunk] = idx
            nd[start:start + chunk] = np.take_along_axis(D, idx, axis=1)
        self.k_distance = nd[:, -1]
        rd = np.maximum(nd, self.k_distance[nbrs])
        with np.errstate(divide="ignore"):
            self.lrd = k / rd.sum(axis=1)

    def _neighbors(self, x):
        dist = cdist(np.asarray(x, dtype=np.float64).reshape(1, -1), self.X)[0]
        same = np.flatnonzero(dist == 0.0)
        for i in same:
            if np.array_equal(self.X[i], x):
                dist[i] = np.inf
                break
        idx = np.argsort(dist, kind="stable")[: self.params.k]
        return idx, dist[idx]

    def score(self, x) -> float:
        idx, dist = self._neighbors(x)
        rd = np.maximum(dist, self.k_distance[idx])
        total = rd.sum()
        lrd_x = np.inf if total == 0 else self.params.k / total
        with np.errstate(invalid="ignore", divide="ignore"):
            ratios = self.lrd[idx] / lrd_x
        # inf/inf arises only among exact duplicates; treat as density parity
        ratios = np.where(np.isnan(ratios), 1.0, ratios)
        return float(ratios.mean())

    def label(self, x) -> int:
        return 1 if self.score(x) <= self.params.inlier_threshold else -1


def lof(x, data, params: LofParams = LofParams()) -> float:
    return LofIndex(_matrix(data), params).score(x)


def lof_label(x, data, params: LofParams = LofParams()) -> int:
    return LofIndex(_matrix(data), params).label(x)


def _matrix(data):
    return data.X if hasattr(data, "X") else np.asarray(data, dtype=np.float64)


@dataclass
class RetrainedFamily:
    models: list
    tag: str = ""

    def __post_init__(self):
        dims = {m.n_features for m in self.models}
        if len(dims) > 1:
            raise ValueError("retrained models disagree on n_features")


def validity(cfs, family) -> float:
    """Fraction of (counterfactual, new model) pairs where the new model accepts."""
    models = family.models if isinstance(family, RetrainedFamily) else list(family)
    cfs = np.asarray(cfs, dtype=np.float64)
    if cfs.size == 0 or not models:
        raise ValueError("validity needs at least one counterfactual and one model")
    if cfs.ndim == 1:
        cfs = cfs.reshape(1, -1)
    accepted = [np.asarray(m.predict_proba(cfs)) > 0.5 for m in models]
    return float(np.mean(accepted))


def cost(x, cf, p: int = 1) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(cf, dtype=float), ord=p))


def cantelli_bound(V: float, tau: float) -> float:
    """Upper bound ``V^2 / (V^2 + (tau - 0.5)^2)`` on the invalidation probability."""
    if not tau > 0.5:
        raise ValueError("the bound requires tau > 0.5")
    if V < 0:
        raise ValueError("V must be >= 0")
    return V * V / (V * V + (tau - 0.5) ** 2)


@dataclass
class StabilityHistogram:
    scores: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    model_outputs: np.ndarray = field(default_factory=lambda: np.empty(0))
    neighborhood_means: np.ndarray = field(default_factory=lambda: np.empty(0))

    def quantile(self, q: float) -> float:
        if not 0 <= q <= 1:
            raise ValueError("quantile must lie in [0, 1]")
        return float(np.quantile(self.scores, q))

    def companion(self, which: str, bins=None):
        values = {"model_output": self.model_outputs, "neighborhood_mean": self.neighborhood_means}[which]
        return np.histogram(values, bins=bins if bins is not None else len(self.counts))

    def rows(self):
        return [(float(a), float(b), int(c)) for a, b, c in zip(self.edges[:-1], self.edges[1:], self.counts)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count"])
            for a, b, c in self.rows():
                w.writerow([repr(a), repr(b), c])


def stability_histogram(data, model, params: StabilityParams, bins: int = 20,
                        companions: bool = True) -> StabilityHistogram:
    """Histogram of stability over the dataset points the model accepts."""
    X = _matrix(data)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    out = np.asarray(model.predict_proba(X))
    acc = X[out > 0.5]
    if acc.shape[0] == 0:
        raise ValueError("model accepts no dataset point")
    scores = stability_batch(acc, model, params)
    counts, edges = np.histogram(scores, bins=bins)
    means = np.array([neighborhood_mean(a, model, params) for a in acc]) if companions else np.empty(0)
    return StabilityHistogram(scores, counts, edges, out[out > 0.5], means)
