import math
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corrective_il.data import (
    DemoFormatError, DemoSet, InsufficientDataError, NoiseConfig, Trajectory, compute_stats,
    inject_noise, load_demos, save_demos,
)
from corrective_il.geometry import FrameError, FrameTag


def make_traj(rng, n=5, tid="t0", frame=FrameTag.ROBOT):
    s = rng.standard_normal((n, 11))
    s[:, 3:7] /= np.linalg.norm(s[:, 3:7], axis=1, keepdims=True)
    s[:, 3:7] *= np.sign(s[:, 3:4])
    return Trajectory(tid, np.arange(n) * 0.01, s, rng.standard_normal((n, 8)), True, 0.005, frame)


def test_round_trip_bit_exact(tmp_path, small_demos):
    p = tmp_path / "d.jsonl"
    save_demos(small_demos, p)
    back = load_demos(p)
    assert back.equals(small_demos)


def test_round_trip_awkward_floats(tmp_path):
    rng = np.random.default_rng(1)
    tr = make_traj(rng)
    tr.states[0, 0] = 0.1 + 0.2
    tr.states[1, 1] = 5e-324
    tr.actions[0, 0] = -1.7976931348623157e308
    p = tmp_path / "d.jsonl"
    save_demos(DemoSet((tr,)), p)
    assert load_demos(p).trajectories[0].equals(tr)


def test_empty_set_is_header_only(tmp_path):
    p = tmp_path / "e.jsonl"
    save_demos(DemoSet(), p)
    assert len(p.read_text().splitlines()) == 1
    assert len(load_demos(p)) == 0


def test_nan_rejected_with_line_number(tmp_path):
    rng = np.random.default_rng(2)
    p = tmp_path / "d.jsonl"
    save_demos(DemoSet((make_traj(rng),)), p)
    lines = p.read_text().splitlines()
    lines[2] = re.sub(r'"state":\[[^,]+,', '"state":[NaN,', lines[2])
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DemoFormatError, match=":3:"):
        load_demos(p)


def test_malformed_record_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"version":1,"frame":"robot","rate_hz":100}\n{"traj": "a", "t": 0}\n')
    with pytest.raises(DemoFormatError, match=":2:"):
        load_demos(p)


def test_mixed_frames_rejected():
    rng = np.random.default_rng(3)
    with pytest.raises(FrameError):
        DemoSet((make_traj(rng, tid="a"), make_traj(rng, tid="b", frame=FrameTag.OBJECT)))


def test_failed_trajectories_rejected():
    rng = np.random.default_rng(4)
    tr = make_traj(rng)
    tr.success = False
    with pytest.raises(DemoFormatError):
        DemoSet((tr,))


def test_stats_examples():
    s = np.zeros((2, 11))
    s[:, 0] = [0.0, 2.0]
    mean, var = compute_stats(s)
    assert mean[0] == 1.0 and var[0] == 1.0
    mean, var = compute_stats(np.ones((4, 11)))
    assert np.array_equal(var, np.zeros(11))
    with pytest.raises(InsufficientDataError):
        compute_stats(np.ones((1, 11)))


def test_stats_match_two_pass_oracle():
    x = np.random.default_rng(5).normal(3.0, 2.0, (1000, 11))
    mean, var = compute_stats(x)
    for j in range(11):
        col = [float(v) for v in x[:, j]]
        m = math.fsum(col) / len(col)
        v = math.fsum((c - m) ** 2 for c in col) / len(col)
        assert abs(mean[j] - m) <= 1e-10 and abs(var[j] - v) <= 1e-10


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(eta=-1.0)
    with pytest.raises(ValueError):
        NoiseConfig(fraction=1.5)
    with pytest.raises(ValueError):
        NoiseConfig(eta=float("nan"))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.floats(0, 1), st.floats(0, 2), st.integers(0, 2**31))
def test_actions_preserved_and_subset_size(n, fraction, eta, seed):
    rng = np.random.default_rng(seed)
    tr = make_traj(rng, n)
    var = np.abs(rng.standard_normal(11))
    cfg = NoiseConfig(eta=eta, fraction=fraction, seed=seed)
    xs, ys = inject_noise(tr.states, tr.actions, cfg, var)
    assert ys is tr.actions or np.array_equal(ys, tr.actions)
    assert sorted(map(tuple, ys)) == sorted(map(tuple, tr.actions))
    changed = np.any(xs != tr.states, axis=1).sum()
    assert changed <= math.ceil(fraction * n)
    xs2, _ = inject_noise(tr.states, tr.actions, cfg, var)
    assert np.array_equal(xs, xs2)


def test_zero_eta_and_zero_fraction_unchanged():
    rng = np.random.default_rng(6)
    tr = make_traj(rng, 20)
    var = np.ones(11)
    for cfg in (NoiseConfig(eta=0.0), NoiseConfig(fraction=0.0)):
        xs, ys = inject_noise(tr.states, tr.actions, cfg, var)
        assert np.array_equal(xs, tr.states) and np.array_equal(ys, tr.actions)


def test_noise_std_monte_carlo_and_tail():
    rng = np.random.default_rng(7)
    n = 100_000
    states = np.zeros((n, 11))
    states[:, 3] = 1.0
    states[:, :3] = rng.standard_normal((n, 3))
    var = np.array([4e-4, 1e-4, 9e-4, 0.01, 0.01, 0.01, 0.01, 0.04, 1e-4, 4e-4, 2.5e-5])
    cfg = NoiseConfig(eta=0.01, fraction=1.0, seed=11)
    xs, _ = inject_noise(states, np.zeros((n, 8)), cfg, var)
    d = xs - states
    expected = np.sqrt(cfg.eta * var)
    for j in [0, 1, 2, 7, 8, 9, 10]:
        assert abs(d[:, j].std() / expected[j] - 1) < 0.05
    bound = 5 * np.sqrt(np.max(cfg.eta * var))
    assert np.mean(np.max(np.abs(d), axis=1) > bound) < 1e-4
    q = xs[:, 3:7]
    assert np.allclose(np.linalg.norm(q, axis=1), 1, atol=1e-12) and np.all(q[:, 0] >= 0)


def test_rotation_mode_keeps_unit_quaternions():
    rng = np.random.default_rng(8)
    tr = make_traj(rng, 50)
    cfg = NoiseConfig(eta=0.05, fraction=0.5, quat_mode="rotation")
    xs, _ = inject_noise(tr.states, tr.actions, cfg, np.ones(11))
    assert np.allclose(np.linalg.norm(xs[:, 3:7], axis=1), 1, atol=1e-12)


def test_object_frame_conversion_consistent(small_demos):
    oc = small_demos.to_object_frame()
    assert oc.frame is FrameTag.OBJECT
    assert np.array_equal(oc.states[:, 8:], np.zeros((oc.n_steps, 3)))
    assert np.allclose(oc.actions[:, :3] + small_demos.states[:, 8:], small_demos.actions[:, :3], atol=1e-15)
    with pytest.raises(FrameError):
        oc.in_frame("robot")
