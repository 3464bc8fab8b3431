"""Kinematic chopstick-grasping simulator, scripted demonstrator and grid evaluation.

The arm is modeled as first-order, rate-limited tracking of an end-effector
pose command at 100 Hz. The true tip is offset from the commanded pose by a
per-episode calibration bias; observations report the kinematic estimate
(true tip minus bias), so the bias is invisible to learners, as on a robot
whose link model is off by a few millimeters.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import DemoSet, Trajectory
from .geometry import (
    OPENING_MAX,
    FrameError,
    FrameTag,
    canonicalize_quat,
    normalize_quat,
    quat_from_axis_angle,
    quat_multiply,
    rotate_towards,
)

HOME_QUAT = (0.9553364891256060, 0.0, 0.2955202066613396, 0.0)  # 0.6 rad about +y

OBJECTS = {
    # name: (shape, size in meters: edge length or diameter)
    "cube": ("cube", 0.010),
    "ball20": ("ball", 0.020),
    "ball14": ("ball", 0.014),
}


class Outcome(str, enum.Enum):
    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"


class SimStateError(RuntimeError):
    pass


@dataclass
class SimConfig:
    plate_x: tuple = (0.20, 0.40)
    plate_y: tuple = (-0.10, 0.10)
    workspace_lo: tuple = (0.05, -0.20, 0.0)
    workspace_hi: tuple = (0.50, 0.20, 0.30)
    rate_hz: int = 100
    max_linear_speed: float = 0.10
    max_angular_speed: float = 1.0
    max_opening_speed: float = 2.0
    tracking_gain: float = 0.15
    tracking_noise_std: float = 0.0002
    bias_min: float = 0.001
    bias_max: float = 0.006
    grasp_tolerance: float = 0.002
    grasp_tolerance_cube: float = 0.006
    close_threshold: float = 0.2
    lift_height: float = 0.03
    hold_duration: float = 1.0
    time_limit: float = 12.0
    home_position: tuple = (0.12, 0.0, 0.15)
    home_quat: tuple = HOME_QUAT
    home_opening: float = 0.3
    home_jitter: float = 0.003
    expert_aim_std: float = 0.0007
    expert_dither_std: float = 0.0003
    seed: int = 0

    def __post_init__(self):
        if self.rate_hz != 100:
            raise ValueError("the command rate is fixed at 100 Hz")
        if not 0 < self.tracking_gain <= 1:
            raise ValueError("tracking_gain must lie in (0, 1]")
        for name in ("max_linear_speed", "max_angular_speed", "max_opening_speed",
                     "close_threshold", "lift_height", "hold_duration", "time_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("tracking_noise_std", "bias_min", "bias_max", "grasp_tolerance",
                     "grasp_tolerance_cube", "home_jitter", "expert_aim_std", "expert_dither_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.bias_min > self.bias_max:
            raise ValueError("bias_min exceeds bias_max")

    @property
    def dt(self):
        return 1.0 / self.rate_hz

    @property
    def hold_steps(self):
        return int(round(self.hold_duration * self.rate_hz))

    @property
    def max_steps(self):
        return int(round(self.time_limit * self.rate_hz))

    def home_pose(self):
        return np.concatenate([self.home_position, normalize_quat(self.home_quat), [self.home_opening]])

    def noiseless(self) -> "SimConfig":
        """Copy with every stochastic term switched off."""
        return self.replace(tracking_noise_std=0.0, bias_min=0.0, bias_max=0.0, home_jitter=0.0,
                            expert_aim_std=0.0, expert_dither_std=0.0)

    def replace(self, **kw) -> "SimConfig":
        d = asdict(self)
        d.update(kw)
        return SimConfig(**d)

    def in_plate(self, xy, margin=0.0):
        return (self.plate_x[0] - 1e-12 <= xy[0] - margin and xy[0] + margin <= self.plate_x[1] + 1e-12
                and self.plate_y[0] - 1e-12 <= xy[1] - margin and xy[1] + margin <= self.plate_y[1] + 1e-12)

    def capture_radius(self, shape, size):
        tol = self.grasp_tolerance_cube if shape == "cube" else self.grasp_tolerance
        return tol + 0.5 * size

    # -- plain-text config --------------------------------------------------
    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                v = ", ".join(repr(float(x)) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping):
        kw = {}
        for f in fields(cls):
            if f.name not in mapping:
                continue
            raw = mapping[f.name]
            default = f.default
            if isinstance(default, tuple):
                vals = raw if isinstance(raw, (list, tuple)) else str(raw).split(",")
                kw[f.name] = tuple(float(x) for x in vals)
            elif isinstance(default, int) and not isinstance(default, bool):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


@dataclass
class SceneObject:
    shape: str
    size: float
    position: np.ndarray
    held: bool = False

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("object size must be positive")
        self.position = np.asarray(self.position, dtype=float).reshape(3)


def make_object(name, xy):
    shape, size = OBJECTS[name]
    return SceneObject(shape, size, np.array([xy[0], xy[1], 0.5 * size]))


@dataclass
class EnvState:
    pose: np.ndarray          # true tip pose: position, quaternion, opening
    object: SceneObject
    bias: np.ndarray          # true tip minus kinematic estimate
    rng: np.random.Generator = field(repr=False)
    step_count: int = 0
    held_steps: int = 0
    grasp_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    outcome: Outcome = Outcome.RUNNING
    rate_hz: int = 100
    grasp_attempts: int = 0

    @property
    def t(self):
        return self.step_count / self.rate_hz

    @property
    def held_elapsed(self):
        return self.held_steps / self.rate_hz

    @property
    def done(self):
        return self.outcome is not Outcome.RUNNING


def sample_bias(rng, lo, hi):
    """Uniform direction, norm uniform in ``[lo, hi]``."""
    if hi == 0.0:
        return np.zeros(3)
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    return d * rng.uniform(lo, hi)


def reset(cfg: SimConfig, object_position, object_name="cube", seed=None) -> EnvState:
    xy = np.asarray(object_position, dtype=float)[:2]
    if not cfg.in_plate(xy):
        raise ValueError(f"object position {tuple(xy)} lies outside the plate")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    pose = cfg.home_pose()
    if cfg.home_jitter > 0:
        pose[:3] += rng.uniform(-cfg.home_jitter, cfg.home_jitter, 3)
    bias = sample_bias(rng, cfg.bias_min, cfg.bias_max)
    return EnvState(pose=pose, object=make_object(object_name, xy), bias=bias, rng=rng,
                    rate_hz=cfg.rate_hz)


def observe(env: EnvState) -> np.ndarray:
    """Robot-centric 11-D observation: kinematic pose estimate plus tracked object position."""
    obs = np.empty(11)
    obs[:3] = env.pose[:3] - env.bias
    obs[3:8] = env.pose[3:8]
    obs[8:] = env.object.position
    return obs


def step(env: EnvState, cmd, cfg: SimConfig) -> EnvState:
    """Advance one 10 ms tick toward the robot-centric pose command ``cmd`` (8-vector)."""
    if env.outcome is not Outcome.RUNNING:
        raise SimStateError(f"episode already terminated ({env.outcome.value})")
    cmd = np.asarray(cmd, dtype=float)
    dt = cfg.dt
    pose = env.pose
    target = cmd[:3] + env.bias
    if cfg.tracking_noise_std > 0:
        target = target + env.rng.standard_normal(3) * cfg.tracking_noise_std
    target = np.minimum(np.maximum(target, cfg.workspace_lo), cfg.workspace_hi)
    disp = cfg.tracking_gain * (target - pose[:3])
    dist = math.sqrt(disp @ disp)
    vmax = cfg.max_linear_speed * dt
    if dist > vmax:
        disp *= vmax / dist
    pose[:3] += disp

    q_cmd = cmd[3:7]
    qn = math.sqrt(q_cmd @ q_cmd)
    if qn > 1e-9:
        pose[3:7] = rotate_towards(pose[3:7], q_cmd / qn, cfg.max_angular_speed * dt,
                                   fraction=cfg.tracking_gain)

    prev_open = pose[7]
    goal_open = min(max(cmd[7], 0.0), OPENING_MAX)
    dmax = cfg.max_opening_speed * dt
    new_open = prev_open + min(max(cfg.tracking_gain * (goal_open - prev_open), -dmax), dmax)
    pose[7] = min(max(new_open, 0.0), OPENING_MAX)

    obj = env.object
    thr = cfg.close_threshold
    if not obj.held and prev_open >= thr > pose[7]:
        env.grasp_attempts += 1
        gap = obj.position - pose[:3]
        if math.sqrt(gap @ gap) <= cfg.capture_radius(obj.shape, obj.size):
            obj.held = True
            env.grasp_offset = gap.copy()
    elif obj.held and pose[7] >= thr:
        # chopsticks re-opened: the object falls back onto the plate
        obj.held = False
        env.held_steps = 0
        obj.position = np.array([obj.position[0], obj.position[1], 0.5 * obj.size])

    if obj.held:
        obj.position = pose[:3] + env.grasp_offset
        if pose[2] > cfg.lift_height:
            env.held_steps += 1
        else:
            env.held_steps = 0

    env.step_count += 1
    if env.held_steps >= cfg.hold_steps:
        env.outcome = Outcome.SUCCESS
    elif env.step_count >= cfg.max_steps:
        env.outcome = Outcome.FAILURE
    return env


# -- scripted demonstrator -------------------------------------------------------

class ScriptedExpert:
    """Waypoint demonstrator standing in for the human teleoperator.

    It sees the true tip (so it compensates the calibration bias, up to a
    per-episode aiming error) and follows approach, descend, pause/adjust,
    close, lift and hold phases. ``style_seed`` perturbs speed, hover height,
    hover opening, yaw, pitch and pause length.
    """

    PRE_GRASP = 0.35
    CLOSED = 0.05

    def __init__(self, cfg: SimConfig, style_seed=0, noisy=True):
        self.cfg = cfg
        rng = np.random.default_rng(style_seed)
        self.speed = rng.uniform(0.06, 0.09)
        self.descend_speed = rng.uniform(0.02, 0.035)
        self.hover = rng.uniform(0.03, 0.05)
        self.yaw = rng.uniform(-0.3, 0.3)
        self.pitch = rng.uniform(0.1, 0.3)
        self.pause_steps = int(rng.integers(20, 51))
        self.lift_to = rng.uniform(0.06, 0.08)
        self.hover_open = rng.uniform(0.45, 0.75)
        self.aim = rng.standard_normal(3) * cfg.expert_aim_std if noisy else np.zeros(3)
        self.dither = cfg.expert_dither_std if noisy else 0.0
        self.rng = rng
        self._goals = {d: self._make_goal_quat(d) for d in (False, True)}
        self.reset()

    def reset(self, env=None):
        self.phase = "approach"
        self.timer = 0
        self.grasp_goal = None

    def _goal_quat(self, descend):
        return self._goals[bool(descend)]

    def _make_goal_quat(self, descend):
        q = quat_from_axis_angle([0, 0, 1], self.yaw)
        q = quat_multiply(q, normalize_quat(self.cfg.home_quat))
        if descend:
            q = quat_multiply(quat_from_axis_angle([0, 1, 0], self.pitch), q)
        return canonicalize_quat(q)

    def _move(self, env, goal, speed, gain=0.06):
        """Command one step from the current estimate toward a true-frame goal."""
        est = env.pose[:3] - env.bias
        goal_est = goal - env.bias - self.aim
        delta = goal_est - est
        dist = math.sqrt(delta @ delta)
        vstep = min(speed * self.cfg.dt, gain * dist)
        if dist > 1e-12:
            delta = delta * (vstep / dist)
        # the arm closes a fixed fraction of the gap per tick, so lead the target
        return est + delta / self.cfg.tracking_gain, dist

    def _open_towards(self, env, goal, rate=0.012):
        cur = env.pose[7]
        cmd = cur + min(max(goal - cur, -rate), rate) / self.cfg.tracking_gain
        return min(max(cmd, 0.0), OPENING_MAX)

    def act(self, env: EnvState) -> np.ndarray:
        if env.outcome is not Outcome.RUNNING:
            raise SimStateError("episode already terminated")
        obj = env.object.position
        grasp = obj.copy()
        hover = grasp + np.array([0.0, 0.0, self.hover])
        q_goal = self._goal_quat(self.phase in ("descend", "pause", "close", "lift"))
        opening = self._open_towards(env, self.hover_open)

        if env.object.held:
            if self.phase not in ("lift",):
                self.phase = "lift"
                self.grasp_goal = env.pose[:3] + np.array([0.0, 0.0, 0.0])
            goal = np.array([self.grasp_goal[0], self.grasp_goal[1], self.lift_to])
            pos, _ = self._move(env, goal, 0.05, gain=0.08)
            opening = self._open_towards(env, self.CLOSED, rate=0.02)
        elif self.phase == "approach":
            pos, dist = self._move(env, hover, self.speed)
            if dist < 0.002:
                self.phase = "descend"
        elif self.phase == "descend":
            pos, dist = self._move(env, grasp, self.descend_speed)
            if dist < 0.0008:
                self.phase = "pause"
                self.timer = 0
        elif self.phase == "pause":
            # hold over the object while narrowing the chopsticks to the pre-grasp gap
            pos, _ = self._move(env, grasp, self.descend_speed)
            if self.dither > 0:
                pos = pos + self.rng.standard_normal(3) * self.dither
            rate = (self.hover_open - self.PRE_GRASP) / self.pause_steps
            opening = self._open_towards(env, self.PRE_GRASP, rate=rate)
            if env.pose[7] <= self.PRE_GRASP + 1e-9:
                self.phase = "close"
        elif self.phase == "close":
            pos, _ = self._move(env, grasp, self.descend_speed)
            opening = self._open_towards(env, self.CLOSED, rate=0.02)
            if env.pose[7] < self.cfg.close_threshold - 0.05:
                # closed on nothing: back off and try again
                self.phase = "retry"
        elif self.phase == "retry":
            pos, dist = self._move(env, hover, self.descend_speed)
            if env.pose[7] >= self.hover_open - 1e-9 and dist < 0.002:
                self.aim = self.aim * 0.5
                self.phase = "descend"
        else:  # "lift" after a drop
            self.phase = "retry"
            pos, _ = self._move(env, hover, self.descend_speed)

        q = rotate_towards(env.pose[3:7], q_goal, 0.5 * self.cfg.dt / self.cfg.tracking_gain)
        return np.concatenate([pos, q, [opening]])


class ExpertPolicy:
    """Scripted expert as a rollout policy with a fresh style every episode."""

    def __init__(self, cfg: SimConfig, seed=0, noisy=True):
        self.cfg = cfg
        self.seed = seed
        self.noisy = noisy
        self.episodes = 0
        self.expert = None

    def reset(self, env=None):
        style = _episode_seed(self.seed, 7, self.episodes)
        self.episodes += 1
        self.expert = ScriptedExpert(self.cfg, style, self.noisy)

    def act(self, env):
        return self.expert.act(env)


def _episode_seed(seed, *keys):
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def run_episode(policy, cfg: SimConfig, object_position, object_name, seed, record=True):
    """Roll ``policy`` closed-loop to a terminal outcome.

    ``policy`` exposes ``reset(env)`` and ``act(env) -> 8-vector`` (robot frame).
    Returns ``(env, states, actions, diagnostic)``.
    """
    env = reset(cfg, object_position, object_name, seed=seed)
    policy.reset(env)
    states, actions = [], []
    diagnostic = ""
    while env.outcome is Outcome.RUNNING:
        obs = observe(env)
        a = np.asarray(policy.act(env), dtype=float)
        if a.shape != (8,) or not np.all(np.isfinite(a)):
            env.outcome = Outcome.FAILURE
            diagnostic = f"non-finite action at step {env.step_count}"
            break
        if record:
            states.append(obs)
            actions.append(a)
        step(env, a, cfg)
    return env, states, actions, diagnostic


def generate_demos(cfg: SimConfig, n: int, seed: int = 0, object_name="cube", margin=0.01,
                   min_success_rate=0.05) -> DemoSet:
    """Collect ``n`` successful scripted demonstrations at random placements."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    shape, size = OBJECTS[object_name]
    trajs = []
    attempts = 0
    while len(trajs) < n:
        attempts += 1
        xy = np.array([rng.uniform(cfg.plate_x[0] + margin, cfg.plate_x[1] - margin),
                       rng.uniform(cfg.plate_y[0] + margin, cfg.plate_y[1] - margin)])
        ep_seed = int(rng.integers(2**31))
        style = int(rng.integers(2**31))
        expert = ScriptedExpert(cfg, style)
        env, states, actions, _ = run_episode(expert, cfg, xy, object_name, ep_seed)
        if env.outcome is Outcome.SUCCESS:
            k = len(states)
            trajs.append(Trajectory(f"{object_name}-{len(trajs):04d}", np.arange(k) / cfg.rate_hz,
                                    np.array(states), np.array(actions), True, 0.5 * size,
                                    FrameTag.ROBOT))
        if attempts >= 20 and len(trajs) / attempts < min_success_rate:
            raise RuntimeError(f"expert success rate {len(trajs)}/{attempts} is below "
                               f"{min_success_rate:.0%}; check the simulator config")
    meta = {"object": object_name, "seed": seed, "attempts": attempts}
    return DemoSet(tuple(trajs), FrameTag.ROBOT, cfg.rate_hz, meta)


class _OpenLoop:
    def __init__(self, actions):
        self.actions = actions

    def reset(self, env):
        self.i = 0

    def act(self, env):
        a = self.actions[min(self.i, len(self.actions) - 1)]
        self.i += 1
        return a


def replay(traj: Trajectory, cfg: SimConfig, object_name="cube", seed=0):
    """Re-execute a recorded demo open-loop at its recorded placement."""
    if traj.frame is not FrameTag.ROBOT:
        raise FrameError("replay needs robot-centric actions")
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    if not traj.success:
        raise ValueError("only successful demonstrations are replayed")
    env, *_ = run_episode(_OpenLoop(traj.actions), cfg, traj.initial_object_position, object_name,
                          seed, record=False)
    return env.outcome


# -- grid evaluation ---------------------------------------------------------------

@dataclass
class EpisodeResult:
    cell_row: int
    cell_col: int
    trial: int
    object: str
    outcome: Outcome
    steps: int
    diagnostic: str = ""
    states: np.ndarray | None = field(default=None, repr=False)


@dataclass
class EvalReport:
    episodes: list

    @property
    def success_rate(self):
        if not self.episodes:
            return 0.0
        return sum(e.outcome is Outcome.SUCCESS for e in self.episodes) / len(self.episodes)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell_row", "cell_col", "object", "outcome", "steps"])
        for e in self.episodes:
            w.writerow([e.cell_row, e.cell_col, e.object, e.outcome.value, e.steps])
        n = len(self.episodes)
        wins = sum(e.outcome is Outcome.SUCCESS for e in self.episodes)
        w.writerow(["summary", "", "", f"{wins}/{n}", f"{self.success_rate:.4f}"])
        return buf.getvalue()


def grid_cells(cfg: SimConfig, grid_n=5):
    """Cell-center positions of an ``grid_n x grid_n`` partition of the plate."""
    xs = cfg.plate_x[0] + (np.arange(grid_n) + 0.5) * (cfg.plate_x[1] - cfg.plate_x[0]) / grid_n
    ys = cfg.plate_y[0] + (np.arange(grid_n) + 0.5) * (cfg.plate_y[1] - cfg.plate_y[0]) / grid_n
    return [(r, c, np.array([xs[r], ys[c]])) for r in range(grid_n) for c in range(grid_n)]


def evaluate_grid(policy, cfg: SimConfig, object_name="cube", grid_n=5, trials_per_cell=1,
                  seed=0, record_states=False) -> EvalReport:
    episodes = []
    for r, c, xy in grid_cells(cfg, grid_n):
        for k in range(trials_per_cell):
            ep_seed = _episode_seed(seed, r, c, k)
            env, states, _, diag = run_episode(policy, cfg, xy, object_name, ep_seed, record=record_states)
            episodes.append(EpisodeResult(r, c, k, object_name, env.outcome, env.step_count, diag,
                                          np.array(states) if record_states else None))
    return EvalReport(episodes)
