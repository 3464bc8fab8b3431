"""Pick the compiled k-NN kernel when available, else the numpy fallback.

Set ``CORRECTIVE_IL_PURE_PYTHON=1`` before import to force the fallback.
Both paths return the exact k nearest rows with ties broken by lower id.
"""
import os

import numpy as np

from . import _knn_py

try:
    from . import _knn_kernel
except ImportError:  # no compiler at install time
    _knn_kernel = None

FORCE_PYTHON = os.environ.get("CORRECTIVE_IL_PURE_PYTHON", "") in ("1", "true", "yes")
BACKEND = "python" if FORCE_PYTHON or _knn_kernel is None else "cython"


class BrutePlan:
    """Exhaustive numpy scan."""

    backend = "python"

    def __init__(self, features, weights):
        self.features = features
        self.weights = np.ascontiguousarray(weights, dtype=float)

    def query(self, q, k, exclude=-1, hints=None):
        return _knn_py.knn_query(self.features, q, self.weights, k, exclude)

    def loo(self, k, rows):
        return _knn_py.knn_query_loo(self.features, self.weights, k, rows)


def embedding(features, weights):
    """Weighted Euclidean embedding of everything but the rotation terms.

    Its squared norm differences never exceed the full distance, so any unit
    projection of it gives an admissible pruning key.
    """
    w = np.sqrt(weights)
    cols = []
    for s in range(3):
        cols.append(features[:, 8 * s:8 * s + 3] * w[s])
    for s in range(3):
        cols.append(features[:, 8 * s + 7:8 * s + 8] * w[6 + s])
    cols.append(features[:, 24:27] * w[9])
    return np.concatenate(cols, axis=1)


class SweepPlan:
    """Compiled scan over rows sorted by their projection on the embedding's main axis."""

    backend = "cython"

    def __init__(self, features, weights):
        self.features = features
        self.weights = np.ascontiguousarray(weights, dtype=float)
        emb = embedding(features, self.weights)
        if len(emb) > 1:
            cov = np.cov(emb, rowvar=False)
            vals, vecs = np.linalg.eigh(cov)
            axis = vecs[:, -1]
        else:
            axis = np.eye(emb.shape[1])[0]
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        self.axis = np.ascontiguousarray(axis / np.linalg.norm(axis))
        keys = _knn_kernel.embed_keys(features, self.weights, self.axis)
        self.order = np.argsort(keys, kind="stable").astype(np.intp)
        self.rank = np.empty_like(self.order)
        self.rank[self.order] = np.arange(len(self.order))
        self.keys = np.ascontiguousarray(keys[self.order])
        self.sorted = np.ascontiguousarray(features[self.order])
        self.slack = 1e-9 * (1.0 + float(np.max(np.abs(keys))) if len(keys) else 1.0)

    def query(self, q, k, exclude=-1, hints=None):
        seeds = None
        if hints is not None and len(hints):
            h = np.asarray(hints, dtype=np.intp)
            h = h[(h >= 0) & (h < len(self.order))]
            seeds = self.rank[h]
        return _knn_kernel.sweep_query(self.sorted, self.order, self.keys, self.axis, q,
                                       self.weights, k, self.slack, exclude, seeds)

    def loo(self, k, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return _knn_kernel.sweep_loo(self.sorted, self.order, self.keys, self.axis, self.weights,
                                     k, self.slack, self.rank[rows])


def make_plan(features, weights, backend=None):
    backend = backend or BACKEND
    if backend == "cython":
        if _knn_kernel is None:
            raise RuntimeError("compiled kernel not built")
        return SweepPlan(features, weights)
    return BrutePlan(features, weights)


def available_backends():
    return ["python"] + (["cython"] if _knn_kernel is not None else [])
