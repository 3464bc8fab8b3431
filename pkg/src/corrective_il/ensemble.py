"""Distance-gated combination of the BC network and the k-NN policy.

The network acts while the current history lies close to the demonstrations
(mean distance to the k nearest stored features below ``alpha``); otherwise
the k-NN blend, which can only interpolate demonstrated actions, takes over.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .bc import BCNetwork
from .data import DemoSet, InsufficientDataError
from .geometry import FrameError
from .knn import HISTORY, KnnFeature, KnnIndex, KnnPolicy, blend
from .simulator import observe

BC_BRANCH = "bc"
KNN_BRANCH = "knn"
DEFAULT_QUANTILE = 0.99


@dataclass(frozen=True)
class EnsembleConfig:
    alpha: float
    k: int = 5

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def order_statistic(values, quantile):
    """Smallest value with at least ``quantile`` of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise InsufficientDataError("no values")
    if not 0.0 <= quantile <= 1.0:
        raise ValueError(f"quantile must lie in [0, 1], got {quantile}")
    i = max(math.ceil(quantile * len(v)) - 1, 0)
    return float(v[i])


def strict_gate_threshold(values, quantile):
    """Smallest threshold with at least ``quantile`` of ``values`` strictly below it.

    This is the order statistic nudged up by one ulp, so that under the strict
    ``mean_d < alpha`` gate the quantile's own row still takes the BC branch.
    Quantile 0 returns the minimum, which sends every row to k-NN.
    """
    v = order_statistic(values, quantile)
    return v if quantile == 0.0 else float(np.nextafter(v, np.inf))


def loo_mean_distances(index: KnnIndex, rows=None):
    """Mean distance to the k nearest *other* stored features, per row."""
    if len(index) < index.k + 1:
        raise InsufficientDataError(f"need at least k+1={index.k + 1} stored features, got {len(index)}")
    rows = np.arange(len(index)) if rows is None else np.asarray(rows, dtype=np.int64)
    _, d = index.plan.loo(index.k, rows)
    return d.sum(axis=1) / index.k


def calibrate_alpha(index: KnnIndex, demos: DemoSet | None = None, quantile=DEFAULT_QUANTILE,
                    max_rows=None, seed=0):
    """Gate threshold from the leave-one-out mean neighbor distance of indexed demo steps.

    A ``quantile`` fraction of demo steps falls strictly below the result; see
    :func:`strict_gate_threshold`. ``max_rows`` evaluates a seeded random subset of rows instead of all of them.
    """
    if demos is not None:
        if demos.frame is not index.frame:
            raise FrameError("demos and index use different frames")
        if demos.n_steps < index.k + 1:
            raise InsufficientDataError(f"need at least k+1={index.k + 1} demo steps")
    rows = None
    if max_rows is not None and max_rows < len(index):
        rows = np.sort(np.random.default_rng(seed).choice(len(index), max_rows, replace=False))
    return strict_gate_threshold(loo_mean_distances(index, rows), quantile)


class EnsemblePolicy:
    """Closed-loop ensemble; ``switch_log`` holds one ``(mean_distance, branch)`` per step."""

    def __init__(self, bc: BCNetwork, index: KnnIndex, cfg: EnsembleConfig):
        if bc.frame is not index.frame:
            raise FrameError(f"BC frame {bc.frame.value} differs from index frame {index.frame.value}")
        if cfg.k != index.k:
            raise ValueError(f"config k={cfg.k} differs from index k={index.k}")
        self.bc = bc
        self.index = index
        self.cfg = cfg
        self.knn = KnnPolicy(index)
        self.switch_log: list = []

    def reset(self, env=None):
        self.knn.reset(env)
        self.switch_log = []

    def decide(self, history):
        """Action for a history of policy-frame states (newest last), in the policy frame."""
        states = [np.asarray(s, dtype=float) for s in history][-HISTORY:]
        f = KnnFeature.from_history(states).to_array()
        return self._decide(f, states[-1], None)[0]

    def _decide(self, f, state, hints):
        from .knn import query_arrays

        ids, d = query_arrays(self.index, f, hints=hints)
        mean_d = float(d.sum() / len(d))
        if mean_d < self.cfg.alpha:
            self.switch_log.append((mean_d, BC_BRANCH))
            return self.bc.action(state), ids
        self.switch_log.append((mean_d, KNN_BRANCH))
        return blend(self.index.labels[ids], d), ids

    def act(self, env):
        obs = observe(env)
        f = self.knn.feature(obs)
        a, ids = self._decide(f, self.knn.history[-1], self.knn._hints)
        self.knn._hints = ids + 1
        return self.knn.adapter.action(a, obs)

    @property
    def knn_steps(self):
        return sum(1 for _, b in self.switch_log if b == KNN_BRANCH)

    def switch_log_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "mean_distance", "branch"])
        for i, (d, b) in enumerate(self.switch_log):
            w.writerow([i, repr(d), b])
        return buf.getvalue()
