"""Monte-Carlo counterfactual stability.

The score of a point ``x`` is the mean model output over ``K`` Gaussian
perturbations of ``x`` minus their (population) standard deviation. Each call
seeds its own generator from ``(seed, bytes of x)`` so the score of a point
does not depend on what was evaluated before it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StabilityParams:
    K: int = 1000
    sigma: float = 0.1
    tau: float = 0.65
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


def point_rng(x, seed: int) -> np.random.Generator:
    x = np.ascontiguousarray(x, dtype=np.float64)
    digest = hashlib.sha256(x.tobytes()).digest()
    words = np.frombuffer(digest[:16], dtype=np.uint32)
    return np.random.default_rng([seed & 0xFFFFFFFF, *words.tolist()])


def sample_neighborhood(x, params: StabilityParams) -> np.ndarray:
    """``K`` draws from N(x, sigma^2 I); not clipped to the feature box."""
    x = np.asarray(x, dtype=np.float64)
    rng = point_rng(x, params.seed)
    return x + params.sigma * rng.standard_normal((params.K, x.shape[0]))


def _outputs(x, model, params):
    return np.asarray(model.predict_proba(sample_neighborhood(x, params)), dtype=np.float64)


def score_outputs(outputs) -> float:
    """Mean minus population standard deviation of neighborhood outputs."""
    outputs = np.asarray(outputs, dtype=np.float64)
    # shift by the minimum so a constant neighborhood scores exactly that constant
    lo = outputs.min()
    centered = outputs - lo
    shift = centered.mean()
    return float((lo + shift) - np.sqrt(np.mean((centered - shift) ** 2)))


def stability(x, model, params: StabilityParams) -> float:
    return score_outputs(_outputs(x, model, params))


def neighborhood_mean(x, model, params: StabilityParams) -> float:
    outputs = _outputs(x, model, params)
    lo = outputs.min()
    return float(lo + (outputs - lo).mean())


def stability_test(x, model, params: StabilityParams) -> bool:
    return stability(x, model, params) >= params.tau


def indicator_stability(x, model, params: StabilityParams) -> float:
    """Fraction of neighborhood samples the model accepts (certification-style)."""
    return float(np.mean(_outputs(x, model, params) > 0.5))


def stability_batch(X, model, params: StabilityParams) -> np.ndarray:
    """Stability of every row of ``X``; same values as calling ``stability`` per row."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape[0])
    # chunk so that one predict call sees a few hundred thousand samples
    per_chunk = max(1, 200_000 // params.K)
    for start in range(0, X.shape[0], per_chunk):
        rows = X[start:start + per_chunk]
        samples = np.concatenate([sample_neighborhood(r, params) for r in rows])
        preds = np.asarray(model.predict_proba(samples)).reshape(len(rows), params.K)
        for j in range(len(rows)):
            out[start + j] = score_outputs(preds[j])
    return out
