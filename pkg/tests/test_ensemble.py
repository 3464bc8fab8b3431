import math

import numpy as np
import pytest

from corrective_il.bc import TrainConfig, forward, train
from corrective_il.data import InsufficientDataError
from corrective_il.ensemble import (
    BC_BRANCH, KNN_BRANCH, EnsembleConfig, EnsemblePolicy, calibrate_alpha, loo_mean_distances,
    order_statistic, strict_gate_threshold,
)
from corrective_il.geometry import FrameError
from corrective_il.knn import KnnIndex, blend, build_index, query_arrays
from corrective_il.simulator import SimConfig, evaluate_grid


@pytest.fixture(scope="module")
def parts(small_demos):
    d = small_demos.to_object_frame()
    net = train(d, TrainConfig(epochs=2, seed=0))
    return d, net, build_index(d, k=5)


def test_config_validation():
    for bad in (float("nan"), float("inf"), -1.0):
        with pytest.raises(ValueError):
            EnsembleConfig(bad)
    with pytest.raises(ValueError):
        EnsembleConfig(1.0, k=0)


def test_frame_and_k_must_match(parts, small_demos):
    d, net, idx = parts
    with pytest.raises(FrameError):
        EnsemblePolicy(net, build_index(small_demos), EnsembleConfig(1.0))
    with pytest.raises(ValueError):
        EnsemblePolicy(net, idx, EnsembleConfig(1.0, k=3))


def test_boundary_is_strict(parts):
    d, net, idx = parts
    hist = [d.states[40], d.states[41], d.states[42] + 1e-3]
    pol = EnsemblePolicy(net, idx, EnsembleConfig(1.0))
    pol.decide(hist)
    dbar = pol.switch_log[-1][0]
    assert dbar > 0
    at = EnsemblePolicy(net, idx, EnsembleConfig(dbar))
    a = at.decide(hist)
    assert at.switch_log[-1] == (dbar, KNN_BRANCH)
    above = EnsemblePolicy(net, idx, EnsembleConfig(float(np.nextafter(dbar, np.inf))))
    b = above.decide(hist)
    assert above.switch_log[-1][1] == BC_BRANCH
    assert np.array_equal(b, net.action(hist[-1]))
    assert not np.array_equal(a, b)


def test_alpha_limits(parts):
    d, net, idx = parts
    always_bc = EnsemblePolicy(net, idx, EnsembleConfig(1e18))
    always_knn = EnsemblePolicy(net, idx, EnsembleConfig(0.0))
    for i in range(0, d.n_steps, 211):
        hist = [d.states[max(i - 2, 0)], d.states[max(i - 1, 0)], d.states[i]]
        always_bc.decide(hist)
        always_knn.decide(hist)
    assert all(b == BC_BRANCH for _, b in always_bc.switch_log)
    assert all(b == KNN_BRANCH for _, b in always_knn.switch_log)
    # an exact hit on a padded start feature still has mean distance >= 0 == alpha
    always_knn.decide([d.states[0]])
    assert always_knn.switch_log[-1][1] == KNN_BRANCH


def test_knn_branch_equals_blend(parts):
    d, net, idx = parts
    pol = EnsemblePolicy(net, idx, EnsembleConfig(0.0))
    hist = [d.states[100], d.states[101], d.states[102]]
    out = pol.decide(hist)
    ids, dist = query_arrays(idx, np.concatenate([np.concatenate([s[:8] for s in hist]), hist[-1][8:]]))
    assert np.array_equal(out, blend(idx.labels[ids], dist))


def test_order_statistic_and_strict_threshold():
    v = [5.0, 1.0, 3.0, 2.0, 4.0]
    assert order_statistic(v, 0.0) == 1.0
    assert order_statistic(v, 0.6) == 3.0
    assert order_statistic(v, 1.0) == 5.0
    for q in (0.0, 0.2, 0.5, 0.99, 1.0):
        a = strict_gate_threshold(v, q)
        assert np.mean(np.array(v) < a) >= q
        assert np.mean(np.array(v) < np.nextafter(a, -np.inf)) < q or q == 0.0
    with pytest.raises(ValueError):
        order_statistic(v, 1.5)


def brute_loo(features, w, k):
    out = []
    for i in range(len(features)):
        diff = features - features[i]
        d = np.zeros(len(features))
        for s in range(3):
            d += w.u_pos[s] * np.sum(diff[:, 8 * s:8 * s + 3] ** 2, axis=1)
            dot = np.abs(features[:, 8 * s + 3:8 * s + 7] @ features[i, 8 * s + 3:8 * s + 7])
            d += w.u_rot[s] * (2 * np.arccos(np.minimum(dot, 1.0))) ** 2
            d += w.u_open[s] * diff[:, 8 * s + 7] ** 2
        d += w.u_obj * np.sum(diff[:, 24:] ** 2, axis=1)
        d[i] = np.inf
        out.append(np.sort(d)[:k].mean())
    return np.array(out)


def test_calibration_matches_sort_oracle(small_demos):
    idx = build_index(small_demos, k=5)
    sub = KnnIndex(idx.features[::4][:1000], idx.labels[::4][:1000], 5, idx.weights)
    oracle = brute_loo(sub.features, sub.weights, 5)
    got = loo_mean_distances(sub)
    assert np.allclose(got, oracle, rtol=1e-9, atol=1e-12)
    for q in (0.0, 0.5, 0.99, 1.0):
        alpha = calibrate_alpha(sub, quantile=q)
        ref = np.sort(oracle)[max(math.ceil(q * len(oracle)) - 1, 0)]
        assert alpha == pytest.approx(ref, rel=1e-9)
    assert calibrate_alpha(sub, quantile=0.0) <= got.min()
    assert calibrate_alpha(sub, quantile=1.0) > got.max()


def test_calibration_subsample_deterministic(small_demos):
    idx = build_index(small_demos, k=5)
    a = calibrate_alpha(idx, max_rows=500, seed=3)
    assert a == calibrate_alpha(idx, max_rows=500, seed=3)


def test_calibration_needs_k_plus_one(small_demos):
    idx = build_index(small_demos, k=5)
    tiny = KnnIndex(idx.features[:5], idx.labels[:5], 5)
    with pytest.raises(InsufficientDataError):
        calibrate_alpha(tiny)
    with pytest.raises(FrameError):
        calibrate_alpha(idx, small_demos.to_object_frame())


def test_quantile_one_keeps_bc_on_every_stored_feature(parts):
    d, net, idx = parts
    alpha = calibrate_alpha(idx, d, quantile=1.0)
    pol = EnsemblePolicy(net, idx, EnsembleConfig(alpha))
    for i in range(0, len(idx), 7):
        f = idx.features[i]
        a, _ = pol._decide(f, d.states[i], None)
        assert pol.switch_log[-1][1] == BC_BRANCH
        assert np.array_equal(a, net.action(d.states[i]))


def test_rollout_switch_log_and_csv(parts):
    d, net, idx = parts
    pol = EnsemblePolicy(net, idx, EnsembleConfig(calibrate_alpha(idx, d)))
    rep = evaluate_grid(pol, SimConfig(), "cube", 1, 1, seed=0)
    steps = rep.episodes[0].steps
    assert len(pol.switch_log) == steps
    lines = pol.switch_log_csv().splitlines()
    assert lines[0] == "step,mean_distance,branch" and len(lines) == steps + 1
    assert pol.knn_steps == sum(1 for line in lines[1:] if line.endswith(KNN_BRANCH))
