"""Covariate-shift measurement, paired statistics and the benchmark driver."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .bc import BCPolicy, LossWeights, TrainConfig, train
from .data import DemoSet, NoiseConfig, Trajectory, load_demos, save_demos
from .ensemble import KNN_BRANCH, EnsembleConfig, EnsemblePolicy, calibrate_alpha
from .geometry import FrameTag, states_to_object_frame
from .knn import DistanceWeights, KnnPolicy, build_index
from .simulator import ExpertPolicy, OBJECTS, Outcome, SimConfig, evaluate_grid, generate_demos, replay

# -- PCA -------------------------------------------------------------------------------


class ReducedRankError(ValueError):
    def __init__(self, achievable):
        super().__init__(f"data rank too low; achievable dims: {achievable}")
        self.achievable = achievable


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # (dims, 11), rows orthonormal
    explained_variance: np.ndarray
    total_variance: float

    def standardize(self, states):
        return (np.asarray(states, dtype=float) - self.mean) / self.scale

    def project(self, states):
        return self.standardize(states) @ self.components.T

    def reconstruction_error(self, states):
        """Mean squared residual after projecting onto the components."""
        z = self.standardize(states)
        p = z @ self.components.T
        r = z - p @ self.components
        return float(np.mean(np.sum(r * r, axis=1)))


def _standard_scale(x):
    std = x.std(axis=0)
    return np.where(std < 1e-12, 1.0, std)


def pca_fit(states, dims=2, rank_tol=1e-10):
    """Top principal axes of standardized states (population covariance).

    Each component's largest-magnitude entry is made positive.
    """
    x = np.asarray(states, dtype=float)
    if x.ndim != 2 or len(np.unique(x, axis=0)) < dims + 1:
        raise ValueError(f"need at least {dims + 1} distinct states")
    mean = x.mean(axis=0)
    scale = _standard_scale(x)
    z = (x - mean) / scale
    cov = z.T @ z / len(z)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    rank = int(np.sum(vals > rank_tol * max(vals[0], 1e-300)))
    if rank < dims:
        raise ReducedRankError(list(range(1, rank + 1)))
    comps = vecs[:, :dims].T.copy()
    for i in range(dims):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PcaModel(mean, scale, comps, vals[:dims].copy(), float(np.trace(cov)))


# -- shift metric ------------------------------------------------------------------------


@dataclass
class ShiftReport:
    agent_name: str
    mean_nn_distance: float
    p95_nn_distance: float
    projected_points: np.ndarray = field(repr=False)
    demo_projected: np.ndarray = field(repr=False)


def _state_block(items):
    blocks = []
    for it in items:
        blocks.append(it.states if isinstance(it, Trajectory) else np.asarray(it, dtype=float).reshape(-1, 11))
    return np.concatenate(blocks) if blocks else np.empty((0, 11))


class DemoSupport:
    """Nearest-demo-state lookup in the PCA model's standardized space."""

    def __init__(self, demo_states, pca: PcaModel):
        self.pca = pca
        self.demo_states = np.asarray(demo_states, dtype=float)
        z = np.unique(pca.standardize(self.demo_states), axis=0)
        # columns constant over the demos add the same amount to every
        # candidate distance, so they are left out of the tree and added back
        self.flat = np.all(z == z[:1], axis=0) if len(z) else np.zeros(11, dtype=bool)
        self.flat_value = z[0, self.flat] if len(z) else np.empty(0)
        # sliding-midpoint splits on non-compacted nodes answer far-off queries
        # about 10x faster than the default median tree on trajectory data
        self.tree = cKDTree(z[:, ~self.flat], leafsize=64, balanced_tree=False, compact_nodes=False)

    def distances(self, states):
        x = self.pca.standardize(np.asarray(states, dtype=float).reshape(-1, 11))
        # stalled rollouts repeat states; query each distinct one once
        u, inv = np.unique(x, axis=0, return_inverse=True)
        d, _ = self.tree.query(u[:, ~self.flat], k=1)
        off = u[:, self.flat] - self.flat_value
        if off.size and np.any(off != 0):
            d = np.sqrt(d * d + np.sum(off * off, axis=1))
        return d[inv.reshape(-1)]


def shift_metric(demos: DemoSet, rollouts, pca: PcaModel, agent_name="agent", support=None):
    """Distance from each rollout state to its nearest demo state.

    Distances are measured in the full standardized 11-D space; the PCA
    projection is only for the exported point cloud. ``rollouts`` holds
    trajectories or raw ``(n, 11)`` arrays in the demo set's frame.
    """
    for r in rollouts:
        if isinstance(r, Trajectory) and r.frame is not demos.frame:
            raise ValueError(f"rollout {r.id} frame {r.frame.value} differs from demos {demos.frame.value}")
    states = _state_block(rollouts)
    if len(states) == 0:
        raise ValueError("no rollout states")
    support = support or DemoSupport(demos.states, pca)
    d = support.distances(states)
    return ShiftReport(agent_name, float(d.mean()), float(np.percentile(d, 95)),
                       pca.project(states), pca.project(demos.states))


# -- paired t-test -------------------------------------------------------------------------


def _betacf(a, b, x, tol=1e-15, max_iter=500):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
           + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(lbt)
    # the fraction converges fast on the side of the symmetry point it is evaluated on
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(0.5 * df, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class PairedTestResult:
    mean_diff: float
    t_statistic: float
    p_value: float
    n_pairs: int
    degenerate: bool = False
    infinite_t: bool = False


def paired_t_test(a, b) -> PairedTestResult:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("samples must be 1-D and paired")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedTestResult(0.0, 0.0, 1.0, n, degenerate=True)
        return PairedTestResult(mean, math.copysign(math.inf, mean), 0.0, n, infinite_t=True)
    t = mean / (sd / math.sqrt(n))
    return PairedTestResult(mean, t, t_sf_two_sided(t, n - 1), n)


# -- benchmark ---------------------------------------------------------------------------------

AGENTS = ("Expert", "Replay", "BC+RobotC", "BC+ObjC", "BC+ObjC+Noise", "kNN+RobotC", "kNN+ObjC", "Ensemble")
LEARNED = AGENTS[2:]
OBJECT_NAMES = ("cube", "ball20", "ball14")
COLUMN_LABELS = {"cube": "Cube", "ball20": "Ball20", "ball14": "Ball14"}
SHIFT_AGENTS = ("BC+RobotC", "BC+ObjC", "BC+ObjC+Noise", "kNN+RobotC", "kNN+ObjC", "Ensemble")


@dataclass
class BenchConfig:
    """Benchmark suite settings. Field names double as config-file keys."""

    objects: tuple = OBJECT_NAMES
    n_demos: int = 500
    demo_seed: int = 1
    seed: int = 0
    n_seeds: int = 5
    grid_n: int = 5
    trials_per_cell: int = 1
    epochs: int = TrainConfig.epochs
    batch_size: int = TrainConfig.batch_size
    learning_rate: float = TrainConfig.learning_rate
    optimizer: str = TrainConfig.optimizer
    w_pos: float = LossWeights.w_pos
    w_rot: float = LossWeights.w_rot
    w_open: float = LossWeights.w_open
    eta: float = NoiseConfig.eta
    fraction: float = NoiseConfig.fraction
    k: int = 5
    alpha_quantile: float = 0.99
    calibration_rows: int = 20000
    cloud_stride: int = 20
    demo_paths: dict = field(default_factory=dict)

    @property
    def seeds(self):
        return [self.seed + i for i in range(self.n_seeds)]

    def train_config(self, seed, noise=False):
        lw = LossWeights(self.w_pos, self.w_rot, self.w_open)
        nc = NoiseConfig(eta=self.eta, fraction=self.fraction, seed=seed) if noise else None
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=seed, optimizer=self.optimizer, noise=nc, loss_weights=lw)

    def distance_weights(self):
        return DistanceWeights.from_loss_weights(LossWeights(self.w_pos, self.w_rot, self.w_open))


@dataclass
class BenchReport:
    config: BenchConfig
    success: dict  # (agent, object, seed) -> rate or nan
    shift: dict  # (agent, object, seed) -> mean_nn_distance
    alphas: dict
    knn_trigger: dict  # (object, seed) -> fraction of ensemble rollouts with >= 1 k-NN step
    diagnostics: list
    clouds: list = field(default_factory=list, repr=False)
    runtime_s: float = 0.0

    def per_seed(self, agent, obj):
        return [self.success.get((agent, obj, s), math.nan) for s in self.config.seeds]

    def all_per_seed(self, agent):
        """Per-seed success averaged over objects (the "All" column)."""
        objs = self.config.objects
        return [float(np.mean([self.success.get((agent, o, s), math.nan) for o in objs]))
                for s in self.config.seeds]

    def mean(self, agent, obj=None):
        vals = self.all_per_seed(agent) if obj is None else self.per_seed(agent, obj)
        return float(np.mean(vals))

    def shift_mean(self, agent, obj=None):
        objs = self.config.objects if obj is None else (obj,)
        vals = [self.shift[(agent, o, s)] for o in objs for s in self.config.seeds
                if (agent, o, s) in self.shift]
        return float(np.mean(vals)) if vals else math.nan

    def paired(self, agent_a, agent_b, obj=None):
        f = self.all_per_seed if obj is None else (lambda ag: self.per_seed(ag, obj))
        return paired_t_test(f(agent_a), f(agent_b))

    def table_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [COLUMN_LABELS.get(o, o) for o in self.config.objects] + ["All"])
        for agent in AGENTS:
            row = [agent] + [f"{100 * self.mean(agent, o):.1f}" for o in self.config.objects]
            row.append(f"{100 * self.mean(agent):.1f}")
            w.writerow(row)
        return buf.getvalue()

    def comparisons(self):
        pairs = [("BC+ObjC+Noise", "BC+ObjC"), ("Ensemble", "BC+ObjC+Noise"), ("Ensemble", "BC+RobotC"),
                 ("BC+ObjC", "BC+RobotC"), ("kNN+ObjC", "kNN+RobotC")]
        out = {}
        for a, b in pairs:
            key = f"{a} vs {b}"
            out[key] = {"All": asdict(self.paired(a, b))}
            for o in self.config.objects:
                out[key][o] = asdict(self.paired(a, b, o))
        return out

    def sidecar(self):
        cfg = asdict(self.config)
        cfg["objects"] = list(self.config.objects)
        doc = {
            "config": cfg,
            "seeds": self.config.seeds,
            "success": {a: {o: self.per_seed(a, o) for o in self.config.objects} for a in AGENTS},
            "paired_tests": self.comparisons(),
            "shift_mean_nn_distance": {
                a: {"All": self.shift_mean(a),
                    **{o: [self.shift.get((a, o, s)) for s in self.config.seeds] for o in self.config.objects}}
                for a in SHIFT_AGENTS},
            "alpha": self.alphas,
            "ensemble_knn_trigger_rate": {o: [self.knn_trigger.get((o, s)) for s in self.config.seeds]
                                          for o in self.config.objects},
            "diagnostics": self.diagnostics,
        }
        return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"

    def clouds_csv(self, obj):
        """Projected point cloud for one object: demo states plus first-seed rollouts."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "source", "agent"])
        for x, y, source, agent, o in self.clouds:
            if o == obj:
                w.writerow([repr(float(x)), repr(float(y)), source, agent])
        return buf.getvalue()

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"table": out / "table.csv", "sidecar": out / "report.json"}
        paths["table"].write_text(self.table_csv())
        paths["sidecar"].write_text(self.sidecar())
        for o in self.config.objects:
            paths[f"clouds_{o}"] = out / f"clouds_{o}.csv"
            paths[f"clouds_{o}"].write_text(self.clouds_csv(o))
        return paths


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def load_or_generate_demos(cfg: BenchConfig, sim: SimConfig, obj, cache_dir=None, log=None):
    path = cfg.demo_paths.get(obj)
    if path is not None:
        return load_demos(path)
    if cache_dir is not None:
        p = Path(cache_dir) / f"demos_{obj}_{cfg.n_demos}_{cfg.demo_seed}.jsonl"
        if p.exists():
            return load_demos(p)
    if log:
        log(f"generating {cfg.n_demos} demos for {obj}")
    demos = generate_demos(sim, cfg.n_demos, seed=cfg.demo_seed, object_name=obj)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_demos(demos, p)
    return demos


def _rollout_states(report, frame_to_object):
    blocks = [e.states for e in report.episodes if e.states is not None and len(e.states)]
    s = np.concatenate(blocks) if blocks else np.empty((0, 11))
    return states_to_object_frame(s) if frame_to_object else s


def run_benchmark(cfg: BenchConfig, sim: SimConfig | None = None, cache_dir=None, log=None) -> BenchReport:
    """Train, evaluate and compare every agent on every object over consecutive seeds.

    A failing cell is recorded in ``diagnostics`` with a NaN success rate and
    does not stop the remaining cells.
    """
    t0 = time.perf_counter()
    sim = sim or SimConfig()
    say = log or (lambda msg: None)
    success, shift, alphas, trigger, diags, clouds = {}, {}, {}, {}, [], []

    for obj in cfg.objects:
        if obj not in OBJECTS:
            raise ValueError(f"unknown object {obj!r}")
        demos = load_or_generate_demos(cfg, sim, obj, cache_dir, say)
        dobj = demos.in_frame(FrameTag.OBJECT)
        pca = pca_fit(dobj.states, 2)
        support = DemoSupport(dobj.states, pca)
        w = cfg.distance_weights()
        idx_robot = build_index(demos, cfg.k, w)
        idx_obj = build_index(dobj, cfg.k, w)
        alpha = calibrate_alpha(idx_obj, dobj, cfg.alpha_quantile, max_rows=cfg.calibration_rows,
                                seed=cfg.demo_seed)
        alphas[obj] = alpha
        say(f"{obj}: {len(demos)} demos, {demos.n_steps} steps, alpha={alpha:.6g}")
        stride = max(cfg.cloud_stride, 1)
        for p in pca.project(dobj.states[::stride]):
            clouds.append((p[0], p[1], "demo", "", obj))

        for seed in cfg.seeds:
            nets = {}

            def cell(agent, make_policy, record=False):
                try:
                    rep = evaluate_grid(make_policy(), sim, obj, cfg.grid_n, cfg.trials_per_cell, seed,
                                        record_states=record)
                except Exception as exc:  # keep the other cells going
                    success[(agent, obj, seed)] = math.nan
                    diags.append({"agent": agent, "object": obj, "seed": seed, "error": repr(exc)})
                    return None
                success[(agent, obj, seed)] = rep.success_rate
                if record:
                    states = _rollout_states(rep, True)
                    if len(states):
                        shift[(agent, obj, seed)] = float(support.distances(states).mean())
                        if seed == cfg.seeds[0]:
                            for p in pca.project(states[::stride]):
                                clouds.append((p[0], p[1], "rollout", agent, obj))
                return rep

            cell("Expert", lambda: ExpertPolicy(sim, seed))
            _replay_cell(success, diags, demos, sim, obj, seed, cfg)

            for agent, data, noise in (("BC+RobotC", demos, False), ("BC+ObjC", dobj, False),
                                       ("BC+ObjC+Noise", dobj, True)):
                try:
                    nets[agent] = train(data, cfg.train_config(seed, noise))
                except Exception as exc:
                    success[(agent, obj, seed)] = math.nan
                    diags.append({"agent": agent, "object": obj, "seed": seed, "error": repr(exc)})
                    continue
                cell(agent, lambda: BCPolicy(nets[agent]), record=True)

            cell("kNN+RobotC", lambda: KnnPolicy(idx_robot), record=True)
            cell("kNN+ObjC", lambda: KnnPolicy(idx_obj), record=True)

            ens = []
            if "BC+ObjC+Noise" in nets:
                def make_ens():
                    p = _TriggerLog(EnsemblePolicy(nets["BC+ObjC+Noise"], idx_obj, EnsembleConfig(alpha, cfg.k)))
                    ens.append(p)
                    return p
                if cell("Ensemble", make_ens, record=True) is not None:
                    trigger[(obj, seed)] = ens[0].trigger_rate
            else:
                success[("Ensemble", obj, seed)] = math.nan
                diags.append({"agent": "Ensemble", "object": obj, "seed": seed,
                              "error": "BC+ObjC+Noise network unavailable"})
            say(f"{obj} seed {seed}: " + ", ".join(
                f"{a}={success.get((a, obj, seed), math.nan):.2f}" for a in AGENTS))

    return BenchReport(cfg, success, shift, alphas, trigger, diags, clouds, time.perf_counter() - t0)


class _TriggerLog:
    """Wraps an ensemble policy to count episodes where the k-NN branch fired."""

    def __init__(self, policy: EnsemblePolicy):
        self.policy = policy
        self.fired = []

    def reset(self, env=None):
        self.policy.reset(env)
        self.fired.append(False)

    def act(self, env):
        a = self.policy.act(env)
        if self.policy.switch_log[-1][1] == KNN_BRANCH:
            self.fired[-1] = True
        return a

    @property
    def trigger_rate(self):
        return sum(self.fired) / len(self.fired) if self.fired else 0.0


def _replay_cell(success, diags, demos, sim, obj, seed, cfg):
    n = cfg.grid_n * cfg.grid_n * cfg.trials_per_cell
    trajs = demos.trajectories
    if not trajs:
        success[("Replay", obj, seed)] = math.nan
        diags.append({"agent": "Replay", "object": obj, "seed": seed, "error": "no demonstrations"})
        return
    start = (seed * n) % len(trajs)
    wins = 0
    for i in range(n):
        tr = trajs[(start + i) % len(trajs)]
        wins += replay(tr, sim, obj, seed=seed * 100003 + i) is Outcome.SUCCESS
    success[("Replay", obj, seed)] = wins / n
