import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from g2ra import tensor as T
from g2ra.episode import Pose
from g2ra.world import (BOUNDS, LANDMARK_COUNTS, MAX_STEP, N_2D, N_3D, N_CATEGORIES, Encoders,
                        PolicyConfig, PolicyParams, SceneSpec, generate_scene, load_scenes,
                        oracle_increment, predict_increment, save_scenes, stop_loss,
                        trajectory_loss, view_index)

ENC = Encoders()


def random_pose(rng):
    return Pose(rng.uniform(20, 380), rng.uniform(20, 380), rng.uniform(20, 100), 0.0, 0.0,
                rng.uniform(-math.pi, math.pi))


# ----------------------------------------------------------------- scenes


@pytest.mark.parametrize("difficulty", ["easy", "hard"])
def test_scene_is_deterministic(difficulty):
    assert generate_scene(17, difficulty) == generate_scene(17, difficulty)
    assert generate_scene(17, difficulty) != generate_scene(18, difficulty)


def test_thousand_seeds_stay_inside_bounds():
    outside = 0
    for seed in range(1000):
        for diff in ("easy", "hard"):
            s = generate_scene(seed, diff)
            outside += sum(not s.inside(p) for p in s.landmarks)
            assert s.inside(s.goal) and s.inside(s.start)
    assert outside == 0


@pytest.mark.parametrize("difficulty,lo,hi", [("easy", 40, 120), ("hard", 120, 300)])
def test_start_goal_distance_ranges(difficulty, lo, hi):
    for seed in range(200):
        s = generate_scene(seed, difficulty)
        assert lo <= s.start_goal_distance <= hi
        n_lo, n_hi = LANDMARK_COUNTS[difficulty]
        assert n_lo <= len(s.landmarks) <= n_hi
        assert len(s.landmarks) + len(s.ground) + 1 == N_3D
        assert all(1 <= c < N_CATEGORIES for c in s.categories)


def test_unknown_difficulty():
    with pytest.raises(ValueError):
        generate_scene(0, "medium")


def test_scene_file_round_trip(tmp_path):
    scenes = [generate_scene(i, d) for i in range(3) for d in ("easy", "hard")]
    save_scenes(scenes, tmp_path / "s.jsonl")
    assert load_scenes(tmp_path / "s.jsonl") == scenes
    save_scenes(load_scenes(tmp_path / "s.jsonl"), tmp_path / "t.jsonl")
    assert (tmp_path / "s.jsonl").read_bytes() == (tmp_path / "t.jsonl").read_bytes()


def test_scene_file_count_mismatch(tmp_path):
    save_scenes([generate_scene(0)], tmp_path / "s.jsonl")
    lines = (tmp_path / "s.jsonl").read_text().splitlines()
    (tmp_path / "s.jsonl").write_text(lines[0] + "\n")
    with pytest.raises(ValueError, match="header says 1"):
        load_scenes(tmp_path / "s.jsonl")


# ----------------------------------------------------------------- encoders


def test_token_counts_and_widths():
    s = generate_scene(3, "hard")
    pose = Pose.at(s.start)
    assert ENC.encode_2d(s, pose).shape == (N_2D, 96)
    assert ENC.encode_3d(s, pose).shape == (N_3D, 128)


def test_encoding_is_deterministic_given_noise_seed():
    s = generate_scene(4)
    pose = Pose.at(s.start, 0.3)
    a, b = ENC.encode_2d(s, pose, (1, 2)), ENC.encode_2d(s, pose, (1, 2))
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, ENC.encode_2d(s, pose, (1, 3)).data)
    np.testing.assert_array_equal(ENC.encode_3d(s, pose, 5).data, ENC.encode_3d(s, pose, 5).data)


def test_2d_tokens_ignore_distance_along_a_bearing():
    s = generate_scene(5, "hard")
    pose = Pose.at(s.start, 0.7)
    pos = np.asarray(s.start)
    moved = [tuple(pos + 1.7 * (np.asarray(p) - pos)) for p in s.landmarks]
    far = SceneSpec(s.seed, s.difficulty, s.start, s.goal, moved, s.categories, s.ground)
    np.testing.assert_allclose(ENC.encode_2d(s, pose).data, ENC.encode_2d(far, pose).data, atol=1e-12)
    assert not np.allclose(ENC.encode_3d(s, pose).data, ENC.encode_3d(far, pose).data)


def test_goal_offset_recovered_by_linear_decoder():
    s = generate_scene(6)
    goal = np.asarray(s.goal)
    pose = Pose.at(goal - np.array([50.0, 0.0, 0.0]), 0.0)  # goal 50 m straight ahead
    offsets = ENC.decode_3d_offsets(ENC.encode_3d(s, pose).data)
    np.testing.assert_allclose(offsets[0], [50.0, 0.0, 0.0], atol=1e-8)


def _range_probe_data(seeds):
    """Noiseless token rows of visible landmarks paired with their true range."""
    x2, y2, x3, y3 = [], [], [], []
    for seed in seeds:
        rng = np.random.default_rng([seed, 77])
        s = generate_scene(seed, "easy" if seed % 2 else "hard")
        pose = random_pose(rng)
        feats, tok = ENC.features_2d(s, pose), ENC.encode_2d(s, pose).data
        pos = np.asarray(pose.position)
        lms = np.asarray(s.landmarks)
        rel = lms - pos
        dist = np.linalg.norm(rel, axis=1)
        bearing = rel / dist[:, None]
        cats = np.asarray(s.categories)
        for r in np.flatnonzero((feats[:, -2] == 1) & (feats[:, 0] == 0)):
            cat = int(np.argmax(feats[r, :N_CATEGORIES]))
            err = np.linalg.norm(bearing - feats[r, N_CATEGORIES:N_CATEGORIES + 3], axis=1)
            j = int(np.argmin(np.where(cats == cat, err, np.inf)))
            x2.append(tok[r])
            y2.append(dist[j])
        tok3 = ENC.encode_3d(s, pose).data
        x3.extend(tok3[1:1 + len(lms)])
        y3.extend(dist)
    return [np.asarray(a) for a in (x2, y2, x3, y3)]


def _heldout_r2(x_tr, y_tr, x_te, y_te):
    a = np.hstack([x_tr, np.ones((len(x_tr), 1))])
    w = np.linalg.lstsq(a, y_tr, rcond=None)[0]
    pred = np.hstack([x_te, np.ones((len(x_te), 1))]) @ w
    return 1.0 - ((y_te - pred) ** 2).sum() / ((y_te - y_te.mean()) ** 2).sum()


def test_range_probe_2d_uninformative_3d_informative():
    tr, te = _range_probe_data(range(400)), _range_probe_data(range(400, 600))
    r2_2d = _heldout_r2(tr[0], tr[1], te[0], te[1])
    r2_3d = _heldout_r2(tr[2], tr[3], te[2], te[3])
    assert r2_2d < 0.05, r2_2d
    assert r2_3d > 0.9, r2_3d


def test_view_index_cardinal_directions():
    b = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, -1.0]])
    np.testing.assert_array_equal(view_index(b, 0.0), [0, 1, 2, 3, 4])
    np.testing.assert_array_equal(view_index(b[:1], math.pi / 2), [3])


# ----------------------------------------------------------------- oracle


def test_oracle_step_heads_to_goal_and_is_bounded():
    for seed in range(50):
        s = generate_scene(seed, "hard")
        d = oracle_increment(s, s.start)
        assert np.linalg.norm(d) <= MAX_STEP + 1e-12
        assert np.dot(d, np.subtract(s.goal, s.start)) > 0
    s = generate_scene(0)
    np.testing.assert_array_equal(oracle_increment(s, s.goal), np.zeros(3))
    near = np.asarray(s.goal) - [1.0, 0, 0]
    np.testing.assert_allclose(oracle_increment(s, near), [1.0, 0, 0])


def test_oracle_bends_around_a_blocking_landmark():
    s = SceneSpec(0, "easy", (0.0, 0.0, 50.0), (100.0, 0.0, 50.0), [(14.0, 1.0, 50.0)], [1], [])
    d = oracle_increment(s, s.start)
    assert d[1] < 0  # pushed away from the landmark's side


# ----------------------------------------------------------------- decision head and losses


def test_zero_weights_give_zero_outputs():
    p = PolicyParams.zeros(PolicyConfig(d=8, hidden=4))
    inc, stop = predict_increment(T.TokenMatrix(np.ones((5, 8))), Pose.at((1, 2, 3)), p)
    np.testing.assert_array_equal(inc.data, 0.0)
    assert stop.data[0, 0] == 0.0


def test_increment_norm_bounded_over_random_inputs():
    rng = np.random.default_rng(0)
    p = PolicyParams.init(PolicyConfig(d=8, hidden=16))
    for tensor in p.tensors.values():
        tensor.data *= 50
    for _ in range(1000):
        f = T.TokenMatrix(rng.normal(scale=rng.uniform(0.1, 100), size=(4, 8)))
        inc, _ = predict_increment(f, random_pose(rng), p)
        assert np.linalg.norm(inc.data) <= MAX_STEP


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_trajectory_loss_gradient(pred, target):
    pred, target = np.array(pred), np.array(target)
    if np.linalg.norm(pred) < 1e-2 or np.min(np.abs(pred - target)) < 1e-3:
        return  # stay away from the |pred| = 0 singularity and the L1 kink
    loss, grad = trajectory_loss(pred, target)
    assert loss >= 0
    p = T.ParamTensor("p", pred)
    num = T.finite_difference_gradient(lambda: trajectory_loss(p.data[0], target)[0], [p])
    assert T.relative_error(grad, num["p"][0]).max() < 1e-4


def test_trajectory_loss_zero_at_target_and_zero_target_drops_cosine():
    t = np.array([1.0, 2.0, 2.0])
    assert trajectory_loss(t, t)[0] == pytest.approx(0.0, abs=1e-12)
    assert trajectory_loss(t, np.zeros(3))[0] == pytest.approx(5.0)
    assert trajectory_loss(np.zeros(3), t)[0] == pytest.approx(6.0)


@pytest.mark.parametrize("z", [-800.0, -3.0, 0.0, 2.5, 800.0])
@pytest.mark.parametrize("label", [0.0, 1.0])
def test_stop_loss_stable_and_correct(z, label):
    loss, grad = stop_loss(z, label)
    assert np.isfinite(loss) and loss >= 0
    prob = 1 / (1 + math.exp(-z)) if abs(z) < 700 else float(z > 0)
    assert grad == pytest.approx(prob - label)
    if abs(z) < 50:
        assert loss == pytest.approx(-(label * math.log(prob) + (1 - label) * math.log(1 - prob)))
