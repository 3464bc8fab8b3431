"""Behavior cloning: 11 -> 64 -> 32 -> 8 ReLU network with a composite pose loss."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DemoSet, NoiseConfig, inject_noise
from .geometry import ACTION_DIM, STATE_DIM, FrameAdapter, FrameTag, canonicalize_quat
from .simulator import observe

LAYER_SIZES = (STATE_DIM, 64, 32, ACTION_DIM)
MODEL_VERSION = 1


class DegenerateQuaternionError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class LossWeights:
    """Per-component loss weights.

    Position errors are in meters and rarely exceed a few millimeters, so
    ``w_pos`` is large enough to bring that term to the same order as the
    rotation and opening terms on demonstration data.
    """

    w_pos: float = 30.0
    w_rot: float = 0.1
    w_open: float = 0.5

    def __post_init__(self):
        ws = (self.w_pos, self.w_rot, self.w_open)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError("loss weights must be nonnegative with at least one positive")


@dataclass
class BCNetwork:
    """Dense ReLU network plus fixed input/output affine maps.

    ``forward`` standardizes the raw state with ``in_mean``/``in_std``, runs
    the dense layers and maps the result through ``out_scale``/``out_shift``.
    With ``residual`` the pose part of the input state is added to the output,
    so the layers only model the commanded displacement.
    """

    weights: list
    biases: list
    frame: FrameTag = FrameTag.ROBOT
    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(STATE_DIM))
    in_std: np.ndarray = field(default_factory=lambda: np.ones(STATE_DIM))
    out_shift: np.ndarray = field(default_factory=lambda: np.zeros(ACTION_DIM))
    out_scale: np.ndarray = field(default_factory=lambda: np.ones(ACTION_DIM))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    loss_trace: list = field(default_factory=list, repr=False)
    residual: bool = False

    def __post_init__(self):
        self.frame = FrameTag(self.frame)

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self):
        return np.concatenate([p.ravel() for wb in zip(self.weights, self.biases) for p in wb])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        i = 0
        for k in range(len(self.weights)):
            for arr in (self.weights[k], self.biases[k]):
                arr[...] = flat[i:i + arr.size].reshape(arr.shape)
                i += arr.size
        if i != flat.size:
            raise ValueError(f"expected {i} parameters, got {flat.size}")

    def copy(self):
        return BCNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.frame, self.in_mean.copy(), self.in_std.copy(), self.out_shift.copy(),
                         self.out_scale.copy(), self.loss_weights, self.seed, list(self.loss_trace),
                         self.residual)

    def action(self, state):
        """Network output for one raw state, quaternion renormalized and w >= 0."""
        out = forward(self, state)
        q = out[3:7]
        n = math.sqrt(q @ q)
        if n < 1e-12:
            raise DegenerateQuaternionError("network produced a zero quaternion")
        out[3:7] = canonicalize_quat(q / n)
        return out


def init_network(sizes=LAYER_SIZES, seed=0, frame=FrameTag.ROBOT) -> BCNetwork:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return BCNetwork(weights, biases, FrameTag(frame), seed=seed)


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")


def forward(net: BCNetwork, state):
    """Raw output (physical units) for one state or an ``(n, 11)`` batch."""
    x = np.asarray(state, dtype=float)
    _check_finite(x)
    h = (x - net.in_mean) / net.in_std
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    out = h * net.out_scale + net.out_shift
    if net.residual:
        out = out + x[..., :ACTION_DIM]
    return out


def _forward_cache(net, x):
    h = (x - net.in_mean) / net.in_std
    acts = [h]
    pre = []
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    out = h * net.out_scale + net.out_shift
    if net.residual:
        out = out + x[..., :ACTION_DIM]
    return acts, pre, out


def composite_loss(pred, target, w: LossWeights, return_grad=False):
    """Weighted position MSE + chordal rotation loss + opening squared error.

    ``pred`` and ``target`` are 8-vectors or ``(n, 8)`` batches; for batches
    the per-sample losses are averaged. With ``return_grad`` the gradient
    with respect to ``pred`` is returned too.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    single = pred.ndim == 1
    p = np.atleast_2d(pred)
    t = np.atleast_2d(target)
    n = len(p)
    dpos = p[:, :3] - t[:, :3]
    pq = p[:, 3:7]
    qn = np.linalg.norm(pq, axis=1)
    if np.any(qn < 1e-8):
        raise DegenerateQuaternionError("predicted quaternion norm below 1e-8")
    qhat = pq / qn[:, None]
    c = np.sum(qhat * t[:, 3:7], axis=1)
    dopen = p[:, 7] - t[:, 7]
    per = (w.w_pos * np.mean(dpos ** 2, axis=1) + w.w_rot * (1.0 - c ** 2)
           + w.w_open * dopen ** 2)
    loss = float(per[0]) if single else float(per.mean())
    if not return_grad:
        return loss
    g = np.empty_like(p)
    g[:, :3] = w.w_pos * 2.0 * dpos / 3.0
    dc = (t[:, 3:7] - c[:, None] * qhat) / qn[:, None]
    g[:, 3:7] = -2.0 * w.w_rot * c[:, None] * dc
    g[:, 7] = 2.0 * w.w_open * dopen
    if single:
        return loss, g[0]
    return loss, g / n


def loss_and_grads(net: BCNetwork, x, y, w: LossWeights):
    """Batch loss and parameter gradients (same layout as ``get_flat``)."""
    acts, pre, out = _forward_cache(net, x)
    loss, g = composite_loss(out, y, w, return_grad=True)
    delta = g * net.out_scale
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for k in range(len(net.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k].T) * (pre[k - 1] > 0)
    return loss, gw, gb


@dataclass
class TrainConfig:
    epochs: int = 4
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    noise: NoiseConfig | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    scale_outputs: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _safe_std(var):
    std = np.sqrt(np.asarray(var, dtype=float))
    return np.where(std < 1e-8, 1.0, std)


def train(demos: DemoSet, cfg: TrainConfig) -> BCNetwork:
    """Minibatch training on all (state, action) pairs of ``demos``.

    When ``cfg.noise`` is set, every batch goes through :func:`inject_noise`
    with the demo-set state variance. Deterministic for a given seed.
    """
    if demos.n_steps == 0:
        raise ValueError("empty demonstration set")
    X = demos.states
    Y = demos.actions
    return train_arrays(X, Y, cfg, demos.frame)


def train_arrays(X, Y, cfg: TrainConfig, frame=FrameTag.ROBOT) -> BCNetwork:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = len(X)
    mean = X.mean(axis=0)
    var = ((X - mean) ** 2).mean(axis=0)
    net = init_network(seed=cfg.seed, frame=frame)
    net.loss_weights = cfg.loss_weights
    net.in_mean = mean
    net.in_std = _safe_std(var)
    net.residual = cfg.residual
    if cfg.scale_outputs:
        R = Y - X[:, :ACTION_DIM] if cfg.residual else Y
        rmean = R.mean(axis=0)
        net.out_shift = rmean.copy()
        net.out_scale = _safe_std(((R - rmean) ** 2).mean(axis=0))
        if not cfg.residual:
            # keep the quaternion slice of the output well away from zero norm
            net.out_scale[3:7] = np.maximum(net.out_scale[3:7], 1e-2)
    elif not cfg.residual:
        # zero biases would start every prediction at the zero quaternion
        net.biases[-1][3] = 1.0

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = [p for wb in zip(net.weights, net.biases) for p in wb]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    trace = []
    w = cfg.loss_weights
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = X[idx], Y[idx]
            if cfg.noise is not None:
                xb, yb = inject_noise(xb, yb, cfg.noise, var, rng=rng)
            loss, gw, gb = loss_and_grads(net, xb, yb, w)
            total += loss * len(idx)
            grads = [g for pair in zip(gw, gb) for g in pair]
            t += 1
            if cfg.optimizer == "adam":
                lr_t = cfg.learning_rate * math.sqrt(1 - b2 ** t) / (1 - b1 ** t)
                for p, g, a, v in zip(params, grads, m1, m2):
                    a *= b1
                    a += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    p -= lr_t * a / (np.sqrt(v) + eps)
            else:
                for p, g, a in zip(params, grads, m1):
                    a *= cfg.momentum
                    a -= cfg.learning_rate * g
                    p += a
        epoch_loss = total / n
        trace.append(epoch_loss)
        if not math.isfinite(epoch_loss) or epoch_loss > 1e6:
            raise TrainingDivergedError(f"training diverged (loss {epoch_loss})", trace)
    net.loss_trace = trace
    return net


def grad_check(net: BCNetwork, x, y, w: LossWeights, h=1e-5, n_params=None, seed=0,
               kink_tol=None):
    """Max relative error between backprop and central finite differences.

    Parameters whose perturbation flips the sign of any ReLU pre-activation
    (a kink within ``h``) are skipped. Returns ``(max_rel_err, n_checked, n_skipped)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    _, gw, gb = loss_and_grads(net, x, y, w)
    analytic = np.concatenate([g.ravel() for pair in zip(gw, gb) for g in pair])
    theta = net.get_flat()
    total = theta.size
    if n_params is None or n_params >= total:
        which = np.arange(total)
    else:
        which = np.sort(np.random.default_rng(seed).choice(total, n_params, replace=False))

    def pattern(vec):
        net.set_flat(vec)
        _, pre, out = _forward_cache(net, x)
        return [z > 0 for z in pre[:-1]], out

    base_pattern, _ = pattern(theta)
    worst = 0.0
    skipped = 0
    for i in which:
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        pp, outp = pattern(tp)
        pm, outm = pattern(tm)
        if any(np.any(a != b) for a, b in zip(pp, base_pattern)) or \
                any(np.any(a != b) for a, b in zip(pm, base_pattern)):
            skipped += 1
            continue
        num = (composite_loss(outp, y, w) - composite_loss(outm, y, w)) / (2 * h)
        ga = analytic[i]
        worst = max(worst, abs(ga - num) / max(1.0, abs(ga), abs(num)))
    net.set_flat(theta)
    return worst, len(which) - skipped, skipped


# -- persistence -------------------------------------------------------------------

def save_network(net: BCNetwork, path):
    doc = {
        "format": "corrective_il.bc",
        "version": MODEL_VERSION,
        "layers": [list(w.shape) for w in net.weights],
        "activation": "relu",
        "params": [repr(float(v)) for v in net.get_flat()],
        "in_mean": [repr(float(v)) for v in net.in_mean],
        "in_std": [repr(float(v)) for v in net.in_std],
        "out_shift": [repr(float(v)) for v in net.out_shift],
        "out_scale": [repr(float(v)) for v in net.out_scale],
        "frame": net.frame.value,
        "residual": net.residual,
        "loss_weights": asdict(net.loss_weights),
        "seed": net.seed,
        "final_loss": net.loss_trace[-1] if net.loss_trace else None,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_network(path) -> BCNetwork:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "corrective_il.bc" or doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a version-{MODEL_VERSION} BC model file")
    shapes = [tuple(s) for s in doc["layers"]]
    sizes = tuple([shapes[0][0]] + [s[1] for s in shapes])
    net = init_network(sizes, frame=doc["frame"])
    net.set_flat(np.array([float(v) for v in doc["params"]]))
    for key in ("in_mean", "in_std", "out_shift", "out_scale"):
        setattr(net, key, np.array([float(v) for v in doc[key]]))
    net.loss_weights = LossWeights(**doc["loss_weights"])
    net.seed = int(doc["seed"])
    net.residual = bool(doc.get("residual", False))
    return net


class BCPolicy:
    """Rollout wrapper: observe, map into the network frame, act, map back."""

    def __init__(self, net: BCNetwork):
        self.net = net
        self.adapter = FrameAdapter(net.frame)

    def reset(self, env=None):
        pass

    def act(self, env):
        obs = observe(env)
        return self.adapter.action(self.net.action(self.adapter.state(obs)), obs)
