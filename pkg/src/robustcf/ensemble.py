"""Gradient-boosted tree ensembles: data model, inference, training and I/O.

Routing convention: a sample goes to the left child iff
``x[feature] < threshold``; ties go right.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import expit

from . import _backend

SCHEMA_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for malformed or inconsistent serialized models."""


@dataclass(frozen=True)
class Split:
    id: int
    feature: int
    threshold: float
    left: int
    right: int


@dataclass(frozen=True)
class Leaf:
    id: int
    weight: float


Node = Union[Split, Leaf]


@dataclass
class Tree:
    nodes: dict[int, Node]
    root: int

    def __post_init__(self):
        _check_tree(self)

    def leaf_paths(self):
        """Yield ``(leaf, [(feature, threshold, goes_left), ...])`` for every leaf."""
        stack = [(self.root, [])]
        while stack:
            nid, path = stack.pop()
            node = self.nodes[nid]
            if isinstance(node, Leaf):
                yield node, path
            else:
                # right pushed first so leaves come out left-to-right
                stack.append((node.right, path + [(node.feature, node.threshold, False)]))
                stack.append((node.left, path + [(node.feature, node.threshold, True)]))

    def route(self, x) -> Leaf:
        node = self.nodes[self.root]
        while isinstance(node, Split):
            node = self.nodes[node.left if x[node.feature] < node.threshold else node.right]
        return node


def _check_tree(tree: Tree) -> None:
    if tree.root not in tree.nodes:
        raise ModelFormatError(f"root {tree.root} is not a node id")
    seen = set()
    stack = [tree.root]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise ModelFormatError(f"node {nid} reached twice (cycle or shared child)")
        seen.add(nid)
        node = tree.nodes.get(nid)
        if node is None:
            raise ModelFormatError(f"dangling node id {nid}")
        if isinstance(node, Split):
            if not math.isfinite(node.threshold):
                raise ModelFormatError(f"node {nid} has non-finite threshold")
            stack.extend((node.left, node.right))
        elif not math.isfinite(node.weight):
            raise ModelFormatError(f"leaf {nid} has non-finite weight")
    if len(seen) != len(tree.nodes):
        raise ModelFormatError("tree has unreachable nodes")


@dataclass(frozen=True)
class _Flat:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    roots: np.ndarray


@dataclass
class TreeEnsemble:
    """Additive ensemble ``M(x) = sigmoid(base_margin + sum_t m_t(x))``."""

    trees: list[Tree]
    base_margin: float
    n_features: int
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.n_features)]
        if len(self.feature_names) != self.n_features:
            raise ModelFormatError("feature_names length differs from n_features")
        for t, tree in enumerate(self.trees):
            for node in tree.nodes.values():
                if isinstance(node, Split) and not 0 <= node.feature < self.n_features:
                    raise ModelFormatError(f"tree {t} uses feature {node.feature} >= {self.n_features}")

    @cached_property
    def _flat(self) -> _Flat:
        feature, threshold, left, right, value, roots = [], [], [], [], [], []
        for tree in self.trees:
            offset = len(feature)
            remap = {nid: offset + k for k, nid in enumerate(sorted(tree.nodes))}
            for nid in sorted(tree.nodes):
                node = tree.nodes[nid]
                if isinstance(node, Split):
                    feature.append(node.feature)
                    threshold.append(node.threshold)
                    left.append(remap[node.left])
                    right.append(remap[node.right])
                    value.append(0.0)
                else:
                    feature.append(-1)
                    threshold.append(0.0)
                    left.append(-1)
                    right.append(-1)
                    value.append(node.weight)
            roots.append(remap[tree.root])
        return _Flat(
            np.asarray(feature, dtype=np.int64),
            np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.int64),
            np.asarray(right, dtype=np.int64),
            np.asarray(value, dtype=np.float64),
            np.asarray(roots, dtype=np.int64),
        )

    def predict_margin(self, X):
        """Raw score for one point (returns float) or a batch (returns array)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = np.ascontiguousarray(X.reshape(1, -1) if single else X)
        if X2.ndim != 2 or X2.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        if not np.isfinite(X2).all():
            raise ValueError("inputs must be finite")
        f = self._flat
        out = _backend.predict_margin_batch(
            X2, f.feature, f.threshold, f.left, f.right, f.value, f.roots, float(self.base_margin)
        )
        return float(out[0]) if single else out

    def predict_proba(self, X):
        m = self.predict_margin(X)
        return float(expit(m)) if np.ndim(m) == 0 else expit(m)

    def predict(self, X):
        """Decision ``1{M(x) > 0.5}``."""
        return (np.asarray(self.predict_proba(X)) > 0.5).astype(int)

    def to_dict(self) -> dict:
        trees = []
        for tree in self.trees:
            nodes = []
            for nid in sorted(tree.nodes):
                node = tree.nodes[nid]
                if isinstance(node, Split):
                    nodes.append({"id": nid, "feature": node.feature, "threshold": node.threshold,
                                  "left": node.left, "right": node.right})
                else:
                    nodes.append({"id": nid, "leaf": node.weight})
            trees.append({"nodes": nodes, "root": tree.root})
        return {
            "version": SCHEMA_VERSION,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "base_margin": self.base_margin,
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TreeEnsemble":
        if not isinstance(obj, dict):
            raise ModelFormatError("model must be a JSON object")
        if obj.get("version") != SCHEMA_VERSION:
            raise ModelFormatError(f"unsupported schema version {obj.get('version')!r}")
        for key in ("n_features", "base_margin", "trees"):
            if key not in obj:
                raise ModelFormatError(f"missing field {key!r}")
        trees = []
        for t, raw in enumerate(obj["trees"]):
            try:
                nodes: dict[int, Node] = {}
                for rn in raw["nodes"]:
                    nid = int(rn["id"])
                    if nid in nodes:
                        raise ModelFormatError(f"tree {t}: duplicate node id {nid}")
                    if "leaf" in rn:
                        nodes[nid] = Leaf(nid, float(rn["leaf"]))
                    else:
                        nodes[nid] = Split(nid, int(rn["feature"]), float(rn["threshold"]),
                                           int(rn["left"]), int(rn["right"]))
                trees.append(Tree(nodes, int(raw["root"])))
            except (KeyError, TypeError) as exc:
                raise ModelFormatError(f"tree {t}: malformed node ({exc})") from exc
        return cls(trees, float(obj["base_margin"]), int(obj["n_features"]),
                   list(obj.get("feature_names") or []))


def predict_margin(ensemble: TreeEnsemble, x):
    return ensemble.predict_margin(x)


def predict_proba(ensemble: TreeEnsemble, x):
    return ensemble.predict_proba(x)


def flip_model(ensemble: TreeEnsemble) -> TreeEnsemble:
    """Negate every margin so that the flipped model outputs ``1 - M(x)``."""
    trees = []
    for tree in ensemble.trees:
        nodes = {nid: Leaf(nid, -n.weight) if isinstance(n, Leaf) else n for nid, n in tree.nodes.items()}
        trees.append(Tree(nodes, tree.root))
    return TreeEnsemble(trees, -ensemble.base_margin, ensemble.n_features, list(ensemble.feature_names))


def save_model(ensemble: TreeEnsemble, path) -> None:
    Path(path).write_text(json.dumps(ensemble.to_dict(), indent=1) + "\n")


def load_model(path) -> TreeEnsemble:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    return TreeEnsemble.from_dict(obj)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    n_estimators: int = 100
    max_depth: int = 4
    learning_rate: float = 0.3
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.min_child_weight < 0 or self.reg_lambda < 0:
            raise ValueError("min_child_weight and reg_lambda must be >= 0")


def split_gain(g_left, h_left, g_right, h_right, reg_lambda):
    """Second-order loss reduction of splitting a node into two children."""
    g = g_left + g_right
    h = h_left + h_right
    return 0.5 * (g_left**2 / (h_left + reg_lambda) + g_right**2 / (h_right + reg_lambda)
                  - g**2 / (h + reg_lambda))


def _best_split(X, g, h, cfg: TrainConfig):
    """Exact greedy search over midpoints of consecutive distinct values.

    Returns ``(gain, feature, threshold, left_mask)`` or ``None``. Ties are
    resolved by lowest feature index, then lowest threshold.
    """
    m = X.shape[0]
    if m < 2:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    gl = np.cumsum(g[order], axis=0)[:-1]
    hl = np.cumsum(h[order], axis=0)[:-1]
    G, H = g.sum(), h.sum()
    gr, hr = G - gl, H - hl
    distinct = xs[:-1] < xs[1:]
    ok = distinct & (hl >= cfg.min_child_weight) & (hr >= cfg.min_child_weight)
    if not ok.any():
        return None
    gains = np.where(ok, split_gain(gl, hl, gr, hr, cfg.reg_lambda), -np.inf)
    flat = np.argmax(gains.T)  # feature-major: lowest feature wins ties
    feat, pos = divmod(int(flat), m - 1)
    gain = gains[pos, feat]
    if not gain > 0:
        return None
    lo, hi = xs[pos, feat], xs[pos + 1, feat]
    thr = 0.5 * (lo + hi)
    if not lo < thr <= hi:
        thr = hi
    return float(gain), feat, float(thr), X[:, feat] < thr


def _grow_tree(X, g, h, cfg: TrainConfig):
    nodes: dict[int, Node] = {}
    leaf_value = np.empty(X.shape[0])
    counter = [0]

    def build(idx, depth):
        nid = counter[0]
        counter[0] += 1
        split = _best_split(X[idx], g[idx], h[idx], cfg) if depth < cfg.max_depth else None
        if split is None:
            w = -cfg.learning_rate * g[idx].sum() / (h[idx].sum() + cfg.reg_lambda)
            nodes[nid] = Leaf(nid, float(w))
            leaf_value[idx] = w
            return nid
        _, feat, thr, mask = split
        left = build(idx[mask], depth + 1)
        right = build(idx[~mask], depth + 1)
        nodes[nid] = Split(nid, feat, thr, left, right)
        return nid

    root = build(np.arange(X.shape[0]), 0)
    return Tree(nodes, root), leaf_value


def base_margin_for(y) -> float:
    p = float(np.mean(y))
    if p <= 0.0:
        return -5.0
    if p >= 1.0:
        return 5.0
    return float(np.clip(math.log(p / (1 - p)), -5.0, 5.0))


def train(data, cfg: TrainConfig, *, record_loss: list | None = None) -> TreeEnsemble:
    """Fit a logistic-loss boosted ensemble with exact greedy splits.

    ``data`` is any object with ``X``, ``y`` and ``feature_names``. When
    ``record_loss`` is a list, the training log-loss before the first and
    after every round is appended to it.
    """
    X = np.ascontiguousarray(data.X, dtype=np.float64)
    y = np.asarray(data.y, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if len(np.unique(y)) < 2:
        raise ValueError("training data contains a single class")
    base = base_margin_for(y)
    margin = np.full(X.shape[0], base)
    trees = []
    if record_loss is not None:
        record_loss.append(_log_loss(y, margin))
    for _ in range(cfg.n_estimators):
        p = expit(margin)
        g = p - y
        h = p * (1.0 - p)
        tree, leaf_value = _grow_tree(X, g, h, cfg)
        trees.append(tree)
        margin = margin + leaf_value
        if record_loss is not None:
            record_loss.append(_log_loss(y, margin))
    return TreeEnsemble(trees, base, X.shape[1], list(data.feature_names))


def _log_loss(y, margin) -> float:
    # log(1 + e^{-z}) for y=1, log(1 + e^{z}) for y=0
    return float(np.mean(np.logaddexp(0.0, np.where(y > 0.5, -margin, margin))))
