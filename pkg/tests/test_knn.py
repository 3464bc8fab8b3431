import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corrective_il import kernels
from corrective_il.data import InsufficientDataError
from corrective_il.geometry import FrameTag, quat_distance
from corrective_il.knn import (
    DistanceWeights, KnnFeature, KnnIndex, KnnPolicy, blend, build_index, distance, load_index,
    predict, query, query_arrays, save_index, trajectory_features,
)
from corrective_il.data import save_demos
from conftest import random_quats


def oracle_distance(a, b, w: DistanceWeights):
    """Term-by-term evaluation with the geodesic angle from the geometry module."""
    total = 0.0
    for s in range(3):
        pa, pb = a[8 * s:8 * s + 8], b[8 * s:8 * s + 8]
        total += w.u_pos[s] * float(np.sum((pa[:3] - pb[:3]) ** 2))
        total += w.u_rot[s] * float(quat_distance(pa[3:7], pb[3:7])) ** 2
        total += w.u_open[s] * float(pa[7] - pb[7]) ** 2
    return total + w.u_obj * float(np.sum((a[24:] - b[24:]) ** 2))


def oracle_knn(features, q, w, k, d=None):
    if d is None:
        d = np.array([oracle_distance(f, q, w) for f in features])
    order = sorted(range(len(d)), key=lambda i: (d[i], i))[:k]
    return np.array(order), d[order]


def random_features(rng, n):
    f = np.empty((n, 27))
    for s in range(3):
        f[:, 8 * s:8 * s + 3] = rng.uniform(-0.1, 0.1, (n, 3))
        q = random_quats(rng, n)
        q[q[:, 0] < 0] *= -1
        f[:, 8 * s + 3:8 * s + 7] = q
        f[:, 8 * s + 7] = rng.uniform(0, 0.8, n)
    f[:, 24:] = rng.uniform(-0.1, 0.1, (n, 3))
    return f


def test_default_weights_follow_loss_weights():
    w = DistanceWeights()
    assert w.u_pos == (7.5, 15.0, 30.0) and w.u_obj == 30.0
    with pytest.raises(ValueError):
        DistanceWeights((0, 0, 0), (0, 0, 0), (0, 0, 0), 0)
    with pytest.raises(ValueError):
        DistanceWeights(u_obj=-1)


def test_distance_examples():
    rng = np.random.default_rng(0)
    a = random_features(rng, 1)[0]
    w = DistanceWeights()
    assert distance(a, a, w) == 0.0
    b = a.copy()
    b[24] += 0.1
    only_obj = DistanceWeights((0, 0, 0), (0, 0, 0), (0, 0, 0), 1.0)
    assert distance(a, b, only_obj) == pytest.approx(0.01, rel=1e-12)
    c = a.copy()
    c[11:15] = -c[11:15]
    assert distance(a, c, w) == 0.0


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_distance_matches_oracle_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = random_features(rng, 2)
    w = DistanceWeights()
    d = distance(a, b, w)
    assert d == distance(b, a, w)
    assert d == pytest.approx(oracle_distance(a, b, w), rel=1e-12, abs=1e-15)


def test_feature_padding_and_canonical_quaternions():
    s = np.zeros(11)
    s[:3] = [1, 2, 3]
    s[3:7] = [-1, 0, 0, 0]
    s[8:] = [4, 5, 6]
    f = KnnFeature.from_history([s])
    assert np.array_equal(f.poses[0], f.poses[2]) and f.poses[0, 3] == 1.0
    assert np.array_equal(f.object_position, [4, 5, 6])
    states = np.tile(s, (4, 1))
    states[:, 0] = np.arange(4)
    tf = trajectory_features(states)
    assert tf[0, 0] == tf[0, 8] == tf[0, 16] == 0
    assert list(tf[3, [0, 8, 16]]) == [1, 2, 3]


def oracle_queries(feats, rng, n_near, n_random):
    rows = rng.integers(len(feats), size=n_near)
    near = feats[rows] + rng.normal(0, 3e-3, (n_near, 27))
    for sl in range(3):
        q = near[:, 8 * sl + 3:8 * sl + 7]
        near[:, 8 * sl + 3:8 * sl + 7] = q / np.linalg.norm(q, axis=1, keepdims=True)
    return list(near) + list(random_features(rng, n_random))


def assert_valid_knn(ids, d, features, q, w, k, tol=1e-12):
    """``ids`` is a k-NN set under the oracle metric, up to ties within ``tol``."""
    full = np.array([oracle_distance(f, q, w) for f in features])
    oid, od = oracle_knn(features, q, w, k, full)
    assert np.max(np.abs(d - od)) <= tol
    assert np.max(np.abs(full[ids] - d)) <= tol
    kth = od[-1]
    outside = np.setdiff1d(np.arange(len(features)), ids)
    assert np.all(full[outside] >= kth - tol)
    if len(outside) == 0 or np.min(full[outside]) > kth + tol:
        assert np.array_equal(ids, oid)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_query_matches_oracle(backend, small_demos):
    idx = build_index(small_demos.to_object_frame(), k=5)
    plan = kernels.make_plan(idx.features, idx._w, backend)
    for q in oracle_queries(idx.features, np.random.default_rng(1), 40, 10):
        ids, d = plan.query(np.ascontiguousarray(q), 5)
        assert_valid_knn(ids, d, idx.features, q, idx.weights, 5)


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="compiled kernel not built")
def test_compiled_search_equals_brute_force_scan(small_demos):
    for demos in (small_demos, small_demos.to_object_frame()):
        idx = build_index(demos, k=5)
        brute = kernels.make_plan(idx.features, idx._w, "python")
        sweep = kernels.make_plan(idx.features, idx._w, "cython")
        for q in oracle_queries(idx.features, np.random.default_rng(2), 150, 50):
            q = np.ascontiguousarray(q)
            bi, bd = brute.query(q, 5)
            si, sd = sweep.query(q, 5)
            assert np.array_equal(bi, si) and np.max(np.abs(bd - sd)) <= 1e-12


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_ties_broken_by_lower_id(backend):
    f = np.tile(random_features(np.random.default_rng(2), 1), (6, 1))
    f[[1, 4], 0] += 0.01
    plan = kernels.make_plan(f, DistanceWeights().as_array(), backend)
    ids, d = plan.query(np.ascontiguousarray(f[0]), 4)
    assert list(ids) == [0, 2, 3, 5] and np.all(d == 0)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_loo_excludes_self(backend, small_demos):
    idx = build_index(small_demos, k=3)
    plan = kernels.make_plan(idx.features, idx._w, backend)
    rows = np.arange(0, len(idx), 97)
    ids, d = plan.loo(3, rows)
    for r, row_ids, row_d in zip(rows, ids, d):
        assert r not in row_ids
        others = np.delete(np.arange(len(idx)), r)
        local = np.searchsorted(others, row_ids)
        assert_valid_knn(local, row_d, idx.features[others], idx.features[r], idx.weights, 3)


def test_query_at_stored_feature_and_full_k(small_demos):
    idx = build_index(small_demos, k=5)
    i = 123
    assert query(idx, idx.features[i], k=1)[0] == (i, 0.0)
    small = KnnIndex(idx.features[:7], idx.labels[:7], k=2)
    ids, d = query_arrays(small, idx.features[3], k=7)
    assert sorted(ids) == list(range(7)) and np.all(np.diff(d) >= 0)
    with pytest.raises(ValueError):
        query_arrays(small, idx.features[3], k=8)


def test_index_contract(small_demos):
    idx = build_index(small_demos, k=5)
    assert not idx.features.flags.writeable
    with pytest.raises(ValueError):
        KnnIndex(idx.features[:3], idx.labels[:3], k=5)
    with pytest.raises(InsufficientDataError):
        build_index(small_demos.with_trajectories(()), k=1)


def test_dedup_drops_near_duplicates(small_demos):
    full = build_index(small_demos)
    slim = build_index(small_demos, dedup_tol=1e-6)
    assert len(slim) < len(full)


def test_blend_examples():
    lab = np.tile([0.1, 0.2, 0.3, 1, 0, 0, 0, 0.4], (5, 1))
    out = blend(lab, np.array([0.1, 0.2, 0.3, 0.4, 0.5]))
    assert np.array_equal(out, lab[0])
    two = np.array([[0.0, 0, 0, 1, 0, 0, 0, 0.2], [0.2, 0.4, 0, 1, 0, 0, 0, 0.6]])
    out = blend(two, np.array([0.5, 0.5]))
    assert np.allclose(out[:3], [0.1, 0.2, 0.0], atol=1e-15) and out[7] == pytest.approx(0.4)
    # sign-flipped neighbor quaternion is aligned before averaging
    two[1, 3:7] = [-1, 0, 0, 0]
    assert np.allclose(blend(two, np.array([0.5, 0.5]))[3:7], [1, 0, 0, 0])


def test_exact_hit_returns_stored_label(small_demos):
    idx = build_index(small_demos.to_object_frame())
    # object-frame features repeat while the object is carried, so pick a unique one
    i = next(r for r in range(300, len(idx)) if query_arrays(idx, idx.features[r], k=2)[1][1] > 0)
    ids, _ = query_arrays(idx, idx.features[i])
    assert ids[0] == i
    out = predict(idx, idx.features[i])
    assert np.allclose(out, idx.labels[i], atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_convex_combination_bound(seed):
    rng = np.random.default_rng(seed)
    labels = rng.normal(0, 1, (5, 8))
    labels[:, 3:7] = random_quats(rng, 5)
    d = np.sort(rng.exponential(1e-3, 5))
    out = blend(labels, d)
    for j in (0, 1, 2, 7):
        assert labels[:, j].min() <= out[j] <= labels[:, j].max()
    assert abs(np.linalg.norm(out[3:7]) - 1) < 1e-12


def test_index_file_round_trip(tmp_path, small_demos):
    p = tmp_path / "demos.jsonl"
    save_demos(small_demos, p)
    idx = build_index(small_demos.to_object_frame(), k=4, weights=DistanceWeights(u_obj=2.0))
    save_index(idx, tmp_path / "idx.json", p)
    back = load_index(tmp_path / "idx.json")
    assert back.k == 4 and back.frame is FrameTag.OBJECT and back.weights == idx.weights
    assert np.array_equal(back.features, idx.features) and np.array_equal(back.labels, idx.labels)
    p.write_text(p.read_text() + "\n ")
    with pytest.raises(ValueError, match="hash"):
        load_index(tmp_path / "idx.json")


def test_policy_translation_equivariance(small_demos):
    """Shifting object and start pose by delta shifts every world-frame action by delta."""
    idx = build_index(small_demos.to_object_frame())
    pol = KnnPolicy(idx)
    base = small_demos.trajectories[2].states[:40]
    delta = np.array([0.037, -0.021, 0.0])
    acts = []
    for shift in (np.zeros(3), delta):
        pol.reset(None)
        out = []
        for s in base:
            obs = s.copy()
            obs[:3] += shift
            obs[8:] += shift
            f = pol.feature(obs)
            ids, d = pol.neighbors(f)
            out.append(pol.adapter.action(blend(idx.labels[ids], d), obs))
        acts.append(np.array(out))
    diff = acts[1] - acts[0]
    eps = np.finfo(float).eps
    assert np.max(np.abs(diff[:, :3] - delta)) <= 4 * eps
    assert np.max(np.abs(diff[:, 3:])) <= 4 * eps


def test_pure_python_fallback_selected_by_env(tmp_path):
    import os
    import subprocess
    import sys
    env = dict(os.environ, CORRECTIVE_IL_PURE_PYTHON="1")
    code = "from corrective_il import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
