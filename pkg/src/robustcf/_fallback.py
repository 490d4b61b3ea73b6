"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, or when
``ROBUSTCF_PURE_PYTHON=1`` is set. Results are bit-identical to the compiled
path: trees are accumulated into the margin in the same order.
"""

import numpy as np


def predict_margin_batch(X, feature, threshold, left, right, value, roots, base_margin):
    n = X.shape[0]
    out = np.full(n, base_margin, dtype=np.float64)
    rows = np.arange(n)
    for root in roots:
        node = np.full(n, root, dtype=np.int64)
        feat = feature[node]
        active = feat >= 0
        while active.any():
            idx = rows[active]
            cur = node[idx]
            go_left = X[idx, feat[idx]] < threshold[cur]
            node[idx] = np.where(go_left, left[cur], right[cur])
            feat = feature[node]
            active = feat >= 0
        out += value[node]
    return out
