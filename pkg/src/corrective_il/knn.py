"""Nearest-neighbor policy over a short pose history.

A feature is the last three end-effector poses (oldest first) plus the
object position, 27 floats in all. The distance mirrors the BC loss with
per-slot weights, and predictions blend the labels of the k nearest
stored features by inverse distance.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .bc import LossWeights
from .data import DemoSet, InsufficientDataError, load_demos
from .geometry import OBJ, FrameAdapter, FrameTag, FrameError, canonicalize_quat
from .simulator import observe

FEATURE_DIM = 27
HISTORY = 3
RECENCY = (0.25, 0.5, 1.0)
EPS_D = 1e-9
INDEX_VERSION = 1


@dataclass(frozen=True)
class DistanceWeights:
    """Per-slot weights, slots ordered oldest first.

    Defaults are the BC loss weights scaled by the recency multipliers, with
    the object term weighted like position.
    """

    u_pos: tuple = tuple(r * LossWeights.w_pos for r in RECENCY)
    u_rot: tuple = tuple(r * LossWeights.w_rot for r in RECENCY)
    u_open: tuple = tuple(r * LossWeights.w_open for r in RECENCY)
    u_obj: float = LossWeights.w_pos

    def __post_init__(self):
        for name in ("u_pos", "u_rot", "u_open"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != HISTORY:
                raise ValueError(f"{name} needs {HISTORY} entries")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "u_obj", float(self.u_obj))
        a = self.as_array()
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("distance weights must be finite and nonnegative")
        if not np.any(a > 0):
            raise ValueError("distance weights are all zero")

    @classmethod
    def from_loss_weights(cls, lw: LossWeights, recency=RECENCY):
        r = tuple(recency)
        return cls(tuple(lw.w_pos * x for x in r), tuple(lw.w_rot * x for x in r),
                   tuple(lw.w_open * x for x in r), lw.w_pos)

    def as_array(self):
        return np.array([*self.u_pos, *self.u_rot, *self.u_open, self.u_obj])

    def to_dict(self):
        return {"u_pos": list(self.u_pos), "u_rot": list(self.u_rot),
                "u_open": list(self.u_open), "u_obj": self.u_obj}


@dataclass(frozen=True)
class KnnFeature:
    poses: np.ndarray  # (3, 8), oldest first
    object_position: np.ndarray

    def __post_init__(self):
        p = np.array(self.poses, dtype=float).reshape(HISTORY, 8)
        p[:, 3:7] = canonicalize_quat(p[:, 3:7])
        object.__setattr__(self, "poses", p)
        object.__setattr__(self, "object_position", np.asarray(self.object_position, dtype=float).reshape(3))

    def to_array(self):
        return np.concatenate([self.poses.ravel(), self.object_position])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        return cls(a[:24], a[24:27])

    @classmethod
    def from_history(cls, states):
        """Feature from up to three 11-D states, newest last; short histories are padded."""
        states = [np.asarray(s, dtype=float) for s in states][-HISTORY:]
        if not states:
            raise ValueError("empty history")
        while len(states) < HISTORY:
            states.insert(0, states[0])
        return cls(np.stack([s[:8] for s in states]), states[-1][OBJ])


def trajectory_features(states):
    """``(n, 27)`` features for every step of one trajectory's ``(n, 11)`` states."""
    s = np.asarray(states, dtype=float)
    n = len(s)
    out = np.empty((n, FEATURE_DIM))
    for slot in range(HISTORY):
        lag = HISTORY - 1 - slot
        idx = np.maximum(np.arange(n) - lag, 0)
        out[:, 8 * slot:8 * slot + 8] = s[idx, :8]
    for slot in range(HISTORY):
        q = out[:, 8 * slot + 3:8 * slot + 7]
        out[:, 8 * slot + 3:8 * slot + 7] = canonicalize_quat(q)
    out[:, 24:27] = s[:, OBJ]
    return out


def distance(a, b, w: DistanceWeights) -> float:
    a = a.to_array() if isinstance(a, KnnFeature) else np.asarray(a, dtype=float)
    b = b.to_array() if isinstance(b, KnnFeature) else np.asarray(b, dtype=float)
    return float(kernels._knn_py.pairwise_distance(a[None, :], b, w.as_array())[0])


@dataclass(frozen=True)
class KnnIndex:
    features: np.ndarray
    labels: np.ndarray
    k: int = 5
    weights: DistanceWeights = field(default_factory=DistanceWeights)
    frame: FrameTag = FrameTag.ROBOT
    dedup_tol: float = 0.0

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=float)
        y = np.ascontiguousarray(self.labels, dtype=float)
        if f.ndim != 2 or f.shape[1] != FEATURE_DIM or y.shape != (len(f), 8):
            raise ValueError("features must be (n, 27) and labels (n, 8)")
        if not 1 <= self.k <= len(f):
            raise ValueError(f"k={self.k} must lie in [1, {len(f)}]")
        f.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "frame", FrameTag(self.frame))
        object.__setattr__(self, "_w", self.weights.as_array())
        object.__setattr__(self, "_plan", None)

    @property
    def plan(self):
        """Search structure for the active kernel backend, built on first use."""
        if self._plan is None:
            object.__setattr__(self, "_plan", kernels.make_plan(self.features, self._w))
        return self._plan

    def __len__(self):
        return len(self.features)

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other


def build_index(demos: DemoSet, k=5, weights: DistanceWeights | None = None, dedup_tol=0.0) -> KnnIndex:
    """Index every demo step. ``dedup_tol > 0`` drops steps closer than that to the previous kept step."""
    if weights is None:
        weights = DistanceWeights()
    feats, labels = [], []
    w = weights.as_array()
    for tr in demos.trajectories:
        f = trajectory_features(tr.states)
        y = tr.actions
        if dedup_tol > 0 and len(f) > 1:
            keep = [0]
            for i in range(1, len(f)):
                d = kernels._knn_py.pairwise_distance(f[keep[-1]][None, :], f[i], w)[0]
                if d >= dedup_tol:
                    keep.append(i)
            f, y = f[keep], y[keep]
        feats.append(f)
        labels.append(y)
    if not feats or sum(len(f) for f in feats) < k:
        raise InsufficientDataError(f"need at least k={k} demo steps")
    return KnnIndex(np.concatenate(feats), np.concatenate(labels), k, weights, demos.frame, dedup_tol)


def _feature_array(f):
    a = f.to_array() if isinstance(f, KnnFeature) else np.asarray(f, dtype=float)
    if a.shape != (FEATURE_DIM,):
        raise ValueError("feature must have 27 entries")
    return np.ascontiguousarray(a)


def query_arrays(index: KnnIndex, f, k=None, hints=None):
    """``(ids, distances)`` of the k nearest stored features, ascending."""
    k = index.k if k is None else k
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} exceeds index size {len(index)}")
    return index.plan.query(_feature_array(f), k, -1, hints)


def query(index: KnnIndex, f, k=None):
    ids, d = query_arrays(index, f, k)
    return [(int(i), float(x)) for i, x in zip(ids, d)]


def blend(labels, dists):
    """Inverse-distance blend of neighbor labels; quaternions aligned to the nearest one."""
    labels = np.asarray(labels, dtype=float)
    v = 1.0 / (np.asarray(dists, dtype=float) + EPS_D)
    v = v / v.sum()
    out = np.empty(8)
    out[:3] = v @ labels[:, :3]
    out[7] = v @ labels[:, 7]
    # the weighted mean can round a hair outside the labels' range
    lo, hi = labels.min(axis=0), labels.max(axis=0)
    out[:3] = np.clip(out[:3], lo[:3], hi[:3])
    out[7] = min(max(out[7], lo[7]), hi[7])
    q = labels[:, 3:7].copy()
    flip = q @ q[0] < 0
    q[flip] = -q[flip]
    qs = v @ q
    out[3:7] = canonicalize_quat(qs / np.linalg.norm(qs))
    return out


def predict(index: KnnIndex, f, hints=None):
    """Blended 8-D action in the index frame."""
    ids, d = query_arrays(index, f, hints=hints)
    return blend(index.labels[ids], d)


# -- persistence ---------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_index(index: KnnIndex, path, demos_path):
    """Persist as a reference to the robot-frame demo file plus the config block."""
    path = Path(path)
    demos_path = Path(demos_path)
    try:
        ref = str(demos_path.resolve().relative_to(path.resolve().parent))
    except ValueError:
        ref = str(demos_path.resolve())
    doc = {"format": "corrective_il.knn", "version": INDEX_VERSION, "demos": ref,
           "demos_sha256": _sha256(demos_path), "k": index.k, "frame": index.frame.value,
           "weights": index.weights.to_dict(), "dedup_tol": index.dedup_tol}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_index(path, check_hash=True) -> KnnIndex:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != "corrective_il.knn" or doc.get("version") != INDEX_VERSION:
        raise ValueError(f"{path}: not a k-NN index file of version {INDEX_VERSION}")
    demos_path = Path(doc["demos"])
    if not demos_path.is_absolute():
        demos_path = path.parent / demos_path
    if check_hash and _sha256(demos_path) != doc["demos_sha256"]:
        raise ValueError(f"{demos_path}: content hash differs from the one recorded in {path}")
    demos = load_demos(demos_path).in_frame(doc["frame"])
    w = DistanceWeights(**doc["weights"])
    return build_index(demos, doc["k"], w, doc.get("dedup_tol", 0.0))


# -- closed-loop policy -------------------------------------------------------------------

class KnnPolicy:
    """Rollout wrapper: keeps the pose history and queries the index each step."""

    def __init__(self, index: KnnIndex):
        self.index = index
        self.adapter = FrameAdapter(index.frame)
        self.history: list = []
        self._hints = None

    def reset(self, env):
        self.history = []
        self._hints = None

    def feature(self, obs):
        self.history.append(self.adapter.state(obs))
        self.history = self.history[-HISTORY:]
        return KnnFeature.from_history(self.history).to_array()

    def neighbors(self, f):
        ids, d = query_arrays(self.index, f, hints=self._hints)
        # consecutive queries tend to land on the successors of the last neighbors
        self._hints = ids + 1
        return ids, d

    def act(self, env):
        obs = observe(env)
        ids, d = self.neighbors(self.feature(obs))
        return self.adapter.action(blend(self.index.labels[ids], d), obs)


def check_frame(index: KnnIndex, frame):
    if index.frame is not FrameTag(frame):
        raise FrameError(f"index frame {index.frame.value} differs from {FrameTag(frame).value}")

