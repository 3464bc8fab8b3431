"""Pose arithmetic and the robot-centric / object-centric frame transforms.

Quaternions are stored as ``(w, x, y, z)`` and canonicalized so that
``w >= 0``. All functions accept plain numpy arrays; the dataclasses below
exist for the public API and the file formats.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

OPENING_MAX = 0.8
UNIT_TOL = 1e-6

POS = slice(0, 3)
QUAT = slice(3, 7)
OPEN = 7
OBJ = slice(8, 11)

STATE_DIM = 11
ACTION_DIM = 8


class FrameTag(str, enum.Enum):
    ROBOT = "robot"
    OBJECT = "object"


class FrameError(ValueError):
    """Raised when an operation receives data expressed in the wrong frame."""


def normalize_quat(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero quaternion")
    return canonicalize_quat(q / n)


def canonicalize_quat(q):
    """Flip sign so that w >= 0 (removes the double-cover ambiguity)."""
    q = np.array(q, dtype=float, copy=True)
    if q.ndim == 1:
        if q[0] < 0:
            q = -q
        return q
    neg = q[..., 0] < 0
    q[neg] = -q[neg]
    return q


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return canonicalize_quat(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_rotvec(q):
    q = canonicalize_quat(q)
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return q[1:] / s * angle


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return normalize_quat(np.concatenate([[1.0], 0.5 * v]))
    return quat_from_axis_angle(v / angle, angle)


def _check_unit(q, name):
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} is not a unit quaternion (norm {np.max(np.abs(n - 1.0)) + 1:.9g})")


def quat_distance(q1, q2):
    """Geodesic angle between two rotations, in ``[0, pi]``.

    Works on single quaternions or broadcastable batches.
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    _check_unit(q1, "q1")
    _check_unit(q2, "q2")
    dot = np.abs(np.sum(q1 * q2, axis=-1))
    return 2.0 * np.arccos(np.minimum(dot, 1.0))


def rotate_towards(q_from, q_to, max_angle, fraction=1.0):
    """Slerp ``q_from`` toward ``q_to`` by ``fraction`` of the gap, capped at ``max_angle``."""
    dot = float(np.dot(q_from, q_to))
    if dot < 0.0:
        q_to = -q_to
        dot = -dot
    dot = min(dot, 1.0)
    angle = 2.0 * math.acos(dot)
    if angle < 1e-12 or (fraction >= 1.0 and angle <= max_angle):
        return canonicalize_quat(q_to)
    frac = min(fraction, max_angle / angle)
    half = 0.5 * angle
    s = math.sin(half)
    out = (math.sin((1.0 - frac) * half) * q_from + math.sin(frac * half) * q_to) / s
    # called every simulator tick, so normalize without the array-generic path
    out /= math.sqrt(float(out @ out))
    return -out if out[0] < 0 else out


@dataclass
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    opening: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.orientation = normalize_quat(np.asarray(self.orientation, dtype=float).reshape(4))
        self.opening = float(np.clip(self.opening, 0.0, OPENING_MAX))

    def to_array(self):
        return np.concatenate([self.position, self.orientation, [self.opening]])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        return cls(a[POS], a[QUAT], a[OPEN])


@dataclass
class State:
    pose: Pose
    object_position: np.ndarray
    frame: FrameTag = FrameTag.ROBOT

    def __post_init__(self):
        self.object_position = np.asarray(self.object_position, dtype=float).reshape(3)
        self.frame = FrameTag(self.frame)

    def to_array(self):
        return np.concatenate([self.pose.to_array(), self.object_position])

    @classmethod
    def from_array(cls, a, frame=FrameTag.ROBOT):
        a = np.asarray(a, dtype=float)
        return cls(Pose.from_array(a[:8]), a[OBJ], frame)


@dataclass
class Action:
    target: Pose
    frame: FrameTag = FrameTag.ROBOT

    def __post_init__(self):
        self.frame = FrameTag(self.frame)

    def to_array(self):
        return self.target.to_array()

    @classmethod
    def from_array(cls, a, frame=FrameTag.ROBOT):
        return cls(Pose.from_array(a), frame)


def states_to_object_frame(states):
    """Array form of :func:`to_object_frame` for an ``(n, 11)`` block."""
    out = np.array(states, dtype=float, copy=True)
    out[..., POS] -= out[..., OBJ]
    out[..., OBJ] = 0.0
    return out


def actions_to_object_frame(actions, object_positions):
    out = np.array(actions, dtype=float, copy=True)
    out[..., POS] -= object_positions
    return out


def to_object_frame(state: State) -> State:
    if state.frame is not FrameTag.ROBOT:
        raise FrameError("state is already object-centric")
    obj = state.object_position
    pose = Pose(state.pose.position - obj, state.pose.orientation, state.pose.opening)
    return State(pose, np.zeros(3), FrameTag.OBJECT)


def action_to_object_frame(action: Action, obj) -> Action:
    if action.frame is not FrameTag.ROBOT:
        raise FrameError("action is already object-centric")
    t = action.target
    return Action(Pose(t.position - np.asarray(obj, dtype=float), t.orientation, t.opening), FrameTag.OBJECT)


def from_object_frame(action: Action, obj) -> Action:
    if action.frame is not FrameTag.OBJECT:
        raise FrameError("action is already robot-centric")
    t = action.target
    return Action(Pose(t.position + np.asarray(obj, dtype=float), t.orientation, t.opening), FrameTag.ROBOT)


def state_from_object_frame(state: State, obj) -> State:
    """Inverse of :func:`to_object_frame` given the object position."""
    if state.frame is not FrameTag.OBJECT:
        raise FrameError("state is already robot-centric")
    obj = np.asarray(obj, dtype=float)
    pose = Pose(state.pose.position + obj, state.pose.orientation, state.pose.opening)
    return State(pose, obj.copy(), FrameTag.ROBOT)


class FrameAdapter:
    """Maps simulator observations into a policy frame and actions back out."""

    def __init__(self, frame):
        self.frame = FrameTag(frame)

    def state(self, obs):
        if self.frame is FrameTag.OBJECT:
            return states_to_object_frame(obs)
        return obs

    def action(self, a, obs):
        if self.frame is FrameTag.OBJECT:
            a = a.copy()
            a[:3] += obs[OBJ]
        return a
