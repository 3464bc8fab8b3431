"""Batch command-line front end.

Commands: ``gen``, ``train``, ``eval``, ``replay``, ``analyze`` and ``bench``.
Each writes its outputs plus a ``*.manifest.json`` run manifest. Exit codes
are 1 for usage errors, 2 for validation errors and 3 for runtime failures.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Keys are SimConfig, TrainConfig and benchmark field names, plus
``alpha`` and ``demos.<object>`` for pre-generated demo files. Command-line
flags override file values.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import BenchConfig, DemoSupport, pca_fit, run_benchmark, shift_metric
from .bc import MODEL_VERSION, BCPolicy, load_network, save_network, train
from .data import FORMAT_VERSION, load_demos, save_demos
from .ensemble import DEFAULT_QUANTILE, EnsembleConfig, EnsemblePolicy, calibrate_alpha
from .geometry import FrameTag, states_to_object_frame
from .knn import INDEX_VERSION, KnnPolicy, build_index, load_index, save_index
from .simulator import OBJECTS, Outcome, SimConfig, evaluate_grid, generate_demos, replay

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
STATE_COLUMNS = ["px", "py", "pz", "qw", "qx", "qy", "qz", "opening", "ox", "oy", "oz"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config -----------------------------------------------------------------------------

SIM_KEYS = {f.name for f in fields(SimConfig)}
BENCH_KEYS = {f.name for f in fields(BenchConfig)} - {"demo_paths"}
EXTRA_KEYS = {"alpha"}


def read_config(path):
    """Parse a ``key = value`` file into a dict of strings. Relative demo paths resolve against it."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not (key in SIM_KEYS or key in BENCH_KEYS or key in EXTRA_KEYS or key.startswith("demos.")):
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        if key.startswith("demos.") and not Path(value).is_absolute():
            value = str(path.parent / value)
        out[key] = value
    return out


def bench_config(mapping) -> BenchConfig:
    kw = {}
    for f in fields(BenchConfig):
        if f.name not in mapping:
            continue
        raw = mapping[f.name]
        if f.name == "objects":
            kw[f.name] = tuple(s.strip() for s in str(raw).split(",") if s.strip())
        elif isinstance(f.default, bool):
            kw[f.name] = str(raw).lower() in ("1", "true", "yes")
        elif isinstance(f.default, int):
            kw[f.name] = int(raw)
        elif isinstance(f.default, float):
            kw[f.name] = float(raw)
        else:
            kw[f.name] = str(raw)
    kw["demo_paths"] = {k.split(".", 1)[1]: v for k, v in mapping.items() if k.startswith("demos.")}
    cfg = BenchConfig(**kw)
    for obj in list(cfg.objects) + list(cfg.demo_paths):
        if obj not in OBJECTS:
            raise ValueError(f"unknown object {obj!r}")
    return cfg


def _settings(args, overrides):
    mapping = read_config(args.config) if getattr(args, "config", None) else {}
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    sim = SimConfig.from_mapping({k: v for k, v in mapping.items() if k in SIM_KEYS})
    return mapping, sim, bench_config(mapping)


# -- manifest ------------------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance record; timestamps live here and nowhere else."""

    command: str
    argv: list
    config_path: str | None
    seeds: list
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    tool_version: str = __version__
    started_at: str = ""
    wall_clock_s: float = 0.0

    def add_input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path):
        self.outputs[str(path)] = sha256_file(path)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")


def _manifest_path(out):
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- commands --------------------------------------------------------------------------------

def cmd_gen(args, man: RunManifest):
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be >= 1")
    mapping, sim, cfg = _settings(args, {"n_demos": args.n, "demo_seed": args.seed})
    obj = args.object
    demos = generate_demos(sim, cfg.n_demos, seed=cfg.demo_seed, object_name=obj)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_demos(demos, out)
    man.seeds = [cfg.demo_seed]
    man.settings = {"n": cfg.n_demos, "object": obj, "attempts": demos.meta.get("attempts")}
    man.add_output(out)
    return out


def _load_model(path):
    """Return ``("bc", net)`` or ``("knn", index)`` by sniffing the file's format tag."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"model file {path} not found")
    try:
        fmt = json.loads(path.read_text()).get("format")
    except (json.JSONDecodeError, UnicodeDecodeError, AttributeError) as exc:
        raise ValueError(f"{path}: not a model file") from exc
    if fmt == "corrective_il.bc":
        return "bc", load_network(path)
    if fmt == "corrective_il.knn":
        return "knn", load_index(path)
    raise ValueError(f"{path}: unknown model format {fmt!r}")


def cmd_train(args, man: RunManifest):
    if args.noise_eta is not None and not args.noise_eta >= 0:
        raise UsageError("--noise-eta must be >= 0")
    if args.method == "knn" and args.noise_eta:
        raise UsageError("--noise-eta applies to bc only")
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be >= 1")
    mapping, sim, cfg = _settings(args, {"seed": args.seed, "eta": args.noise_eta, "epochs": args.epochs,
                                         "k": args.k})
    demos_path = Path(args.demos)
    if not demos_path.is_file():
        raise FileNotFoundError(f"demo file {demos_path} not found")
    man.add_input(demos_path)
    demos = load_demos(demos_path).in_frame(args.frame)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.method == "bc":
        noise = args.noise_eta is not None and args.noise_eta > 0
        tc = cfg.train_config(cfg.seed, noise)
        net = train(demos, tc)
        save_network(net, out)
        man.settings = {"method": "bc", "frame": args.frame, "train": asdict(tc),
                        "final_loss": net.loss_trace[-1] if net.loss_trace else None}
    else:
        if demos.frame is not FrameTag(args.frame):
            raise ValueError("demos could not be mapped to the requested frame")
        index = build_index(demos, cfg.k, cfg.distance_weights())
        save_index(index, out, demos_path)
        man.settings = {"method": "knn", "frame": args.frame, "k": cfg.k, "weights": index.weights.to_dict()}
    man.seeds = [cfg.seed]
    man.add_output(out)
    return out


def _policy(models, alpha_arg, cfg: BenchConfig, man: RunManifest):
    kinds = sorted(k for k, _ in models)
    by_kind = dict(models)
    if len(models) == 1:
        if alpha_arg is not None:
            raise UsageError("--ensemble-alpha needs one bc model and one knn index")
        kind, m = models[0]
        return BCPolicy(m) if kind == "bc" else KnnPolicy(m)
    if kinds != ["bc", "knn"]:
        raise UsageError("pass one model, or one bc model plus one knn index for the ensemble")
    net, index = by_kind["bc"], by_kind["knn"]
    if alpha_arg is None or alpha_arg == "auto":
        alpha = calibrate_alpha(index, quantile=DEFAULT_QUANTILE, max_rows=cfg.calibration_rows,
                                seed=cfg.demo_seed)
        man.settings["alpha_source"] = "auto"
    else:
        try:
            alpha = float(alpha_arg)
        except ValueError:
            raise UsageError(f"--ensemble-alpha must be 'auto' or a number, got {alpha_arg!r}") from None
        man.settings["alpha_source"] = "flag"
    man.settings["alpha"] = alpha
    return EnsemblePolicy(net, index, EnsembleConfig(alpha, index.k))


def _write_rollouts(report, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode"] + STATE_COLUMNS)
    for i, ep in enumerate(report.episodes):
        for s in ep.states:
            w.writerow([i] + [repr(float(x)) for x in s])
    Path(path).write_text(buf.getvalue())


def read_rollouts(path, frame=FrameTag.OBJECT):
    """Rollout states from an eval rollout CSV or a trajectory file, mapped into ``frame``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"rollout file {path} not found")
    with open(path, newline="") as fh:
        head = fh.readline()
    if head.strip().split(",")[:2] == ["episode", "px"]:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        states = data[:, 1:]
        if states.shape[1] != 11:
            raise ValueError(f"{path}: expected 11 state columns")
        return states_to_object_frame(states) if FrameTag(frame) is FrameTag.OBJECT else states
    return load_demos(path).in_frame(frame).states


def cmd_eval(args, man: RunManifest):
    if not args.model:
        raise UsageError("at least one --model is required")
    if args.grid < 1 or args.trials < 1:
        raise UsageError("--grid and --trials must be >= 1")
    cells = args.grid * args.grid
    if args.trials % cells:
        raise UsageError(f"--trials must be a multiple of the {cells} grid cells")
    mapping, sim, cfg = _settings(args, {"seed": args.seed})
    models = []
    for p in args.model:
        models.append(_load_model(p))
        man.add_input(p)
    policy = _policy(models, args.ensemble_alpha, cfg, man)
    report = evaluate_grid(policy, sim, args.object, args.grid, args.trials // cells, cfg.seed,
                           record_states=args.rollouts_out is not None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    man.add_output(out)
    if args.rollouts_out:
        _write_rollouts(report, args.rollouts_out)
        man.add_output(args.rollouts_out)
    if isinstance(policy, EnsemblePolicy):
        man.settings["ensemble"] = True
    man.settings.update({"object": args.object, "grid": args.grid, "trials": args.trials,
                         "success_rate": report.success_rate})
    man.seeds = [cfg.seed]
    return out


def cmd_replay(args, man: RunManifest):
    mapping, sim, cfg = _settings(args, {"seed": args.seed})
    demos_path = Path(args.demos)
    if not demos_path.is_file():
        raise FileNotFoundError(f"demo file {demos_path} not found")
    man.add_input(demos_path)
    demos = load_demos(demos_path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trajectory", "outcome"])
    wins = 0
    for i, tr in enumerate(demos.trajectories):
        outcome = replay(tr, sim, args.object, seed=cfg.seed * 100003 + i)
        wins += outcome is Outcome.SUCCESS
        w.writerow([tr.id, outcome.value])
    n = len(demos)
    w.writerow(["summary", f"{wins}/{n}"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    man.add_output(out)
    man.seeds = [cfg.seed]
    man.settings = {"object": args.object, "success_rate": wins / n if n else 0.0}
    return out


def cmd_analyze(args, man: RunManifest):
    demos_path = Path(args.demos)
    if not demos_path.is_file():
        raise FileNotFoundError(f"demo file {demos_path} not found")
    man.add_input(demos_path)
    demos = load_demos(demos_path).in_frame(args.frame)
    pca = pca_fit(demos.states, 2)
    support = DemoSupport(demos.states, pca)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"frame": args.frame, "pca": {"mean": pca.mean.tolist(), "scale": pca.scale.tolist(),
                                            "components": pca.components.tolist(),
                                            "explained_variance": pca.explained_variance.tolist()},
               "agents": {}}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "source", "agent"])
    demo_written = False
    for p in args.rollouts:
        man.add_input(p)
        states = read_rollouts(p, args.frame)
        name = Path(p).stem
        rep = shift_metric(demos, [states], pca, name, support)
        summary["agents"][name] = {"mean_nn_distance": rep.mean_nn_distance,
                                   "p95_nn_distance": rep.p95_nn_distance, "n_states": len(states)}
        if not demo_written:
            for x, y in rep.demo_projected:
                w.writerow([repr(float(x)), repr(float(y)), "demo", ""])
            demo_written = True
        for x, y in rep.projected_points:
            w.writerow([repr(float(x)), repr(float(y)), "rollout", name])
    (out / "shift.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "clouds.csv").write_text(buf.getvalue())
    man.add_output(out / "shift.json")
    man.add_output(out / "clouds.csv")
    return out


def cmd_bench(args, man: RunManifest):
    overrides = {"n_seeds": args.n_seeds, "n_demos": args.n_demos, "seed": args.seed,
                 "objects": args.objects}
    mapping, sim, cfg = _settings(args, overrides)
    for obj, p in cfg.demo_paths.items():
        if not Path(p).is_file():
            raise FileNotFoundError(f"demo file {p} for {obj} not found")
        man.add_input(p)
    log = (lambda msg: print(msg, file=sys.stderr, flush=True)) if args.verbose else None
    report = run_benchmark(cfg, sim, cache_dir=args.cache, log=log)
    paths = report.write(args.out)
    for p in paths.values():
        man.add_output(p)
    man.seeds = cfg.seeds
    man.settings = {"alpha": report.alphas, "failed_cells": len(report.diagnostics)}
    sys.stdout.write(report.table_csv())
    return Path(args.out)


# -- parser -----------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="corrective-il", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"corrective-il {__version__} (trajectory format {FORMAT_VERSION}, "
                           f"model format {MODEL_VERSION}, index format {INDEX_VERSION})")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    objects = sorted(OBJECTS)

    g = sub.add_parser("gen", help="generate scripted demonstrations")
    g.add_argument("--config")
    g.add_argument("--n", type=int)
    g.add_argument("--object", choices=objects, default="cube")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a BC network or build a k-NN index")
    t.add_argument("--config")
    t.add_argument("--method", choices=["bc", "knn"], required=True)
    t.add_argument("--frame", choices=["robot", "object"], default="object")
    t.add_argument("--noise-eta", type=float)
    t.add_argument("--demos", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="grid evaluation of one model or a BC + k-NN ensemble")
    e.add_argument("--config")
    e.add_argument("--model", action="append", default=[])
    e.add_argument("--ensemble-alpha")
    e.add_argument("--object", choices=objects, default="cube")
    e.add_argument("--grid", type=int, default=5)
    e.add_argument("--trials", type=int, default=25)
    e.add_argument("--seed", type=int)
    e.add_argument("--rollouts-out")
    e.add_argument("--out", required=True)

    r = sub.add_parser("replay", help="open-loop replay of every demonstration")
    r.add_argument("--config")
    r.add_argument("--demos", required=True)
    r.add_argument("--object", choices=objects, default="cube")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)

    a = sub.add_parser("analyze", help="covariate-shift metric and PCA point clouds")
    a.add_argument("--demos", required=True)
    a.add_argument("--rollouts", nargs="+", required=True)
    a.add_argument("--frame", choices=["robot", "object"], default="object")
    a.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="full multi-seed benchmark")
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.add_argument("--n-seeds", type=int)
    b.add_argument("--n-demos", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--objects")
    b.add_argument("--cache", help="directory for generated demo files")
    b.add_argument("--verbose", action="store_true")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "replay": cmd_replay,
            "analyze": cmd_analyze, "bench": cmd_bench}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; see --help")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    man = RunManifest(args.command, argv, getattr(args, "config", None), [],
                      started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    t0 = time.perf_counter()
    try:
        out = COMMANDS[args.command](args, man)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    man.wall_clock_s = time.perf_counter() - t0
    man.write(_manifest_path(out))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
