# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled tree-walking kernel.

Mirrors ``robustcf._fallback.predict_margin_batch`` exactly, including the
order in which tree outputs are summed, so both backends agree bit for bit.
"""

import numpy as np

ctypedef long long i64


def predict_margin_batch(const double[:, ::1] X,
                         const i64[::1] feature,
                         const double[::1] threshold,
                         const i64[::1] left,
                         const i64[::1] right,
                         const double[::1] value,
                         const i64[::1] roots,
                         double base_margin):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t n_trees = roots.shape[0]
    cdef Py_ssize_t i, t
    cdef i64 node, f
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    with nogil:
        for i in range(n):
            acc = base_margin
            for t in range(n_trees):
                node = roots[t]
                f = feature[node]
                while f >= 0:
                    if X[i, f] < threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                    f = feature[node]
                acc = acc + value[node]
            res[i] = acc
    return out
