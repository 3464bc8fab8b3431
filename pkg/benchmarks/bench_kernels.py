"""Time the compiled k-NN search against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--rows N] [--queries Q] [--loo R]

Both backends index the same synthetic demo features. The script checks that
they return identical neighbor ids before printing timings.
"""
import argparse
import time

import numpy as np

from corrective_il import kernels
from corrective_il.knn import DistanceWeights, trajectory_features
from corrective_il.simulator import SimConfig, generate_demos


def features(n_rows, seed):
    cfg = SimConfig()
    demos = generate_demos(cfg, max(1, n_rows // 650), seed=seed)
    f = np.concatenate([trajectory_features(t.states) for t in demos.trajectories])
    return np.ascontiguousarray(f[:n_rows])


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=30000)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--loo", type=int, default=2000)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if "cython" not in kernels.available_backends():
        raise SystemExit("compiled kernel not built; run pip install -e . first")

    f = features(args.rows, args.seed)
    w = DistanceWeights().as_array()
    rng = np.random.default_rng(args.seed)
    # queries near the data, as in closed-loop rollouts
    q = f[rng.integers(len(f), size=args.queries)] + rng.normal(0, 2e-3, (args.queries, f.shape[1]))
    rows = np.sort(rng.choice(len(f), size=min(args.loo, len(f)), replace=False))
    print(f"index rows={len(f)} queries={len(q)} loo rows={len(rows)} k={args.k}")

    results = {}
    for backend in ("python", "cython"):
        plan, t_build = timed(kernels.make_plan, f, w, backend)
        ids, t_query = timed(lambda: [plan.query(x, args.k)[0] for x in q])
        (loo_ids, _), t_loo = timed(plan.loo, args.k, rows)
        results[backend] = (np.array(ids), loo_ids)
        print(f"{backend:>7}: build {t_build * 1e3:8.1f} ms  query {t_query / len(q) * 1e3:8.3f} ms/q  "
              f"loo {t_loo:7.2f} s")
    same = (np.array_equal(results["python"][0], results["cython"][0])
            and np.array_equal(results["python"][1], results["cython"][1]))
    print("neighbor ids identical:", same)


if __name__ == "__main__":
    main()
