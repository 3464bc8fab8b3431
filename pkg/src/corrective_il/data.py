"""Demonstration containers, the line-delimited trajectory file, and noise injection."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .geometry import (
    ACTION_DIM,
    OBJ,
    QUAT,
    STATE_DIM,
    FrameTag,
    FrameError,
    actions_to_object_frame,
    canonicalize_quat,
    quat_from_rotvec,
    quat_multiply,
    states_to_object_frame,
)

FORMAT_VERSION = 1
RATE_HZ = 100


class DemoFormatError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass
class Trajectory:
    """One episode: ``states`` is ``(n, 11)``, ``actions`` is ``(n, 8)``."""

    id: str
    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    success: bool = True
    object_radius: float = 0.0
    frame: FrameTag = FrameTag.ROBOT

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float).reshape(-1, STATE_DIM)
        self.actions = np.asarray(self.actions, dtype=float).reshape(-1, ACTION_DIM)
        self.frame = FrameTag(self.frame)
        n = len(self.times)
        if len(self.states) != n or len(self.actions) != n:
            raise DemoFormatError(f"trajectory {self.id}: ragged step arrays")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise DemoFormatError(f"trajectory {self.id}: timestamps not strictly increasing")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))
                and np.all(np.isfinite(self.times))):
            raise DemoFormatError(f"trajectory {self.id}: non-finite values")

    def __len__(self):
        return len(self.times)

    @property
    def initial_object_position(self):
        return self.states[0, OBJ].copy()

    def to_object_frame(self) -> "Trajectory":
        if self.frame is not FrameTag.ROBOT:
            raise FrameError(f"trajectory {self.id} is already object-centric")
        return Trajectory(
            self.id, self.times.copy(),
            states_to_object_frame(self.states),
            actions_to_object_frame(self.actions, self.states[:, OBJ]),
            self.success, self.object_radius, FrameTag.OBJECT,
        )

    def equals(self, other: "Trajectory") -> bool:
        return (self.id == other.id and self.success == other.success
                and self.object_radius == other.object_radius and self.frame == other.frame
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions))


@dataclass(frozen=True)
class DemoSet:
    """Immutable set of successful trajectories sharing one frame tag."""

    trajectories: tuple = ()
    frame: FrameTag = FrameTag.ROBOT
    rate_hz: int = RATE_HZ
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "frame", FrameTag(self.frame))
        for tr in self.trajectories:
            if tr.frame is not self.frame:
                raise FrameError(f"trajectory {tr.id} has frame {tr.frame.value}, set is {self.frame.value}")
            if not tr.success:
                raise DemoFormatError(f"trajectory {tr.id} is a failed episode; demo sets keep successes only")

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_steps(self):
        return sum(len(t) for t in self.trajectories)

    @cached_property
    def states(self):
        if not self.trajectories:
            return np.empty((0, STATE_DIM))
        return np.concatenate([t.states for t in self.trajectories])

    @cached_property
    def actions(self):
        if not self.trajectories:
            return np.empty((0, ACTION_DIM))
        return np.concatenate([t.actions for t in self.trajectories])

    @cached_property
    def stats(self):
        return compute_stats(self)

    def with_trajectories(self, trajectories) -> "DemoSet":
        return DemoSet(tuple(trajectories), self.frame, self.rate_hz, dict(self.meta))

    def to_object_frame(self) -> "DemoSet":
        return DemoSet(tuple(t.to_object_frame() for t in self.trajectories),
                       FrameTag.OBJECT, self.rate_hz, dict(self.meta))

    def in_frame(self, frame) -> "DemoSet":
        frame = FrameTag(frame)
        if frame is self.frame:
            return self
        if frame is FrameTag.OBJECT:
            return self.to_object_frame()
        raise FrameError("object-centric demos cannot be mapped back without object positions")

    def equals(self, other: "DemoSet") -> bool:
        return (self.frame == other.frame and self.rate_hz == other.rate_hz
                and len(self) == len(other)
                and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories)))


def compute_stats(demos):
    """Per-dimension mean and population variance of all states.

    Accepts a :class:`DemoSet` or an ``(n, 11)`` array.
    """
    x = demos.states if isinstance(demos, DemoSet) else np.asarray(demos, dtype=float)
    if len(x) < 2:
        raise InsufficientDataError(f"need at least 2 steps for statistics, got {len(x)}")
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    return mean, var


# -- file format -------------------------------------------------------------

def _fmt(values):
    # repr() is the shortest string that round-trips the double exactly
    return "[" + ",".join(repr(float(v)) for v in values) + "]"


def save_demos(demos: DemoSet, path):
    path = Path(path)
    header = {"version": FORMAT_VERSION, "frame": demos.frame.value, "rate_hz": demos.rate_hz}
    if demos.meta:
        header["meta"] = demos.meta
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for tr in demos.trajectories:
            traj = json.dumps(tr.id)
            succ = "true" if tr.success else "false"
            radius = repr(float(tr.object_radius))
            for t, s, a in zip(tr.times, tr.states, tr.actions):
                fh.write(f'{{"traj":{traj},"t":{float(t)!r},"state":{_fmt(s)},'
                         f'"action":{_fmt(a)},"success":{succ},"radius":{radius}}}\n')


def _reject_constant(name):
    raise ValueError(f"non-finite literal {name}")


def load_demos(path) -> DemoSet:
    path = Path(path)
    groups: dict[str, dict] = {}
    order = []
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise DemoFormatError(f"{path}:1: missing header record")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DemoFormatError(f"{path}:1: {exc}") from None
        if header.get("version") != FORMAT_VERSION:
            raise DemoFormatError(f"{path}:1: unsupported version {header.get('version')!r}")
        try:
            frame = FrameTag(header.get("frame"))
        except ValueError:
            raise DemoFormatError(f"{path}:1: unknown frame {header.get('frame')!r}") from None
        rate = int(header.get("rate_hz", RATE_HZ))
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line, parse_constant=_reject_constant)
                tid = str(rec["traj"])
                t = float(rec["t"])
                state = [float(v) for v in rec["state"]]
                action = [float(v) for v in rec["action"]]
                success = bool(rec["success"])
                radius = float(rec["radius"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DemoFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if len(state) != STATE_DIM or len(action) != ACTION_DIM:
                raise DemoFormatError(f"{path}:{lineno}: expected 11-D state and 8-D action")
            if not all(math.isfinite(v) for v in state + action + [t, radius]):
                raise DemoFormatError(f"{path}:{lineno}: non-finite value")
            if "frame" in rec and rec["frame"] != frame.value:
                raise FrameError(f"{path}:{lineno}: record frame {rec['frame']!r} differs from header")
            g = groups.get(tid)
            if g is None:
                g = groups[tid] = {"t": [], "s": [], "a": [], "success": success, "radius": radius}
                order.append(tid)
            g["t"].append(t)
            g["s"].append(state)
            g["a"].append(action)
    trajs = [Trajectory(tid, g["t"], g["s"], g["a"], g["success"], g["radius"], frame)
             for tid, g in ((tid, groups[tid]) for tid in order)]
    return DemoSet(tuple(trajs), frame, rate, header.get("meta", {}))


# -- noise injection -----------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    """Synthetic corrective labels: perturb a fraction of states, keep actions.

    ``eta`` scales the per-dimension state variance into the noise covariance.
    ``quat_mode`` is ``"flat"`` (add noise to the raw quaternion components and
    renormalize) or ``"rotation"`` (apply a random small rotation instead).
    """

    eta: float = 0.01
    fraction: float = 0.2
    seed: int = 0
    quat_mode: str = "flat"

    def __post_init__(self):
        if not math.isfinite(self.eta) or self.eta < 0:
            raise ValueError(f"eta must be finite and >= 0, got {self.eta}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {self.fraction}")
        if self.quat_mode not in ("flat", "rotation"):
            raise ValueError(f"unknown quat_mode {self.quat_mode!r}")


def noise_std(cfg: NoiseConfig, variance):
    """Per-dimension standard deviation of the injected noise."""
    return np.sqrt(cfg.eta * np.asarray(variance, dtype=float))


def inject_noise(states, actions, cfg: NoiseConfig, variance, rng=None):
    """Return ``(noisy_states, actions)`` for one training batch.

    A uniformly chosen ``ceil(fraction * n)`` subset of rows gets
    ``x + eps`` with ``eps ~ N(0, diag(eta * variance))``; their quaternions are
    renormalized. Actions are returned untouched. Pass ``rng`` to draw from a
    running generator; otherwise ``cfg.seed`` seeds a fresh one.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("batch must be a nonempty (n, 11) array")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out = states.copy()
    n = len(states)
    m = math.ceil(cfg.fraction * n)
    if m == 0 or cfg.eta == 0:
        return out, actions
    rows = rng.choice(n, size=m, replace=False)
    std = noise_std(cfg, variance)
    eps = rng.standard_normal((m, states.shape[1])) * std
    if cfg.quat_mode == "flat":
        noisy = out[rows] + eps
        q = noisy[:, QUAT]
        noisy[:, QUAT] = canonicalize_quat(q / np.linalg.norm(q, axis=1, keepdims=True))
    else:
        noisy = out[rows].copy()
        noisy[:, :3] += eps[:, :3]
        noisy[:, 7:] += eps[:, 7:]
        ang_std = float(np.sqrt(cfg.eta * np.sum(np.asarray(variance)[QUAT])))
        for i in range(m):
            dq = quat_from_rotvec(rng.standard_normal(3) * ang_std)
            noisy[i, QUAT] = canonicalize_quat(quat_multiply(dq, noisy[i, QUAT]))
    out[rows] = noisy
    return out, actions
