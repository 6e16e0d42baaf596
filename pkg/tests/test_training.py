import dataclasses

import numpy as np
import pytest

from g2ra.config import load_config
from g2ra.fusion import G2raConfig
from g2ra.training import (ModelAgent, TrainConfig, TrainingDiverged, format_log, init_models,
                           oracle_reference, scene_split, step_noise_seed, train_policy)
from g2ra.world import generate_scene

TINY = TrainConfig(epochs=1, train_scenes=4, val_scenes=2, train_max_steps=8, eval_max_steps=8,
                   hidden=16, fusion=G2raConfig(12, 10, 16, 4))


def snapshot(fusion, policy):
    return {**{k: v.data.copy() for k, v in fusion.tensors.items()},
            **{"policy." + k: v.data.copy() for k, v in policy.tensors.items()}}


def test_zero_epochs_leaves_initialization():
    cfg = dataclasses.replace(TINY, epochs=0)
    fusion, policy, log = train_policy(cfg)
    init = snapshot(*init_models(cfg))
    trained = snapshot(fusion, policy)
    assert all(np.array_equal(init[k], trained[k]) for k in init)
    assert [(r["epoch"], r["split"]) for r in log] == [(0, "train"), (0, "val"), (0, "selected")]


def test_training_is_deterministic():
    a = train_policy(TINY)
    b = train_policy(TINY)
    assert format_log(a[2]) == format_log(b[2])
    sa, sb = snapshot(a[0], a[1]), snapshot(b[0], b[1])
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_training_moves_only_used_parameters():
    cfg = dataclasses.replace(TINY, variant="two_d_only", select_best=False)
    fusion, policy, _ = train_policy(cfg)
    init_f, _ = init_models(cfg)
    assert not np.array_equal(fusion["w_q_base"].data, init_f["w_q_base"].data)
    assert np.array_equal(fusion["w_k"].data, init_f["w_k"].data)


def test_fixed_scalars_stay_fixed():
    cfg = dataclasses.replace(TINY, eta=0.0, alpha=0.3)
    fusion, _, _ = train_policy(cfg)
    assert fusion.eta_value() == 0.0 and fusion.gate_value() == 0.3


def test_log_rows():
    _, _, log = train_policy(dataclasses.replace(TINY, epochs=2))
    assert [(r["epoch"], r["split"]) for r in log[:-1]] == [
        (0, "train"), (0, "val"), (1, "train"), (1, "val"), (2, "train"), (2, "val")]
    assert log[-1]["split"] == "selected"
    assert all(np.isfinite(r["loss"]) for r in log)
    assert all(r["ne"] is not None for r in log if r["split"] == "val")


def test_divergence_is_reported():
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        with np.errstate(all="ignore"):
            train_policy(dataclasses.replace(TINY, lr=1e305))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="mystery")
    with pytest.raises(ValueError):
        TrainConfig(alpha=0.0)


def test_scene_splits_are_disjoint():
    train = {s.scene_id for s in scene_split(0, 50, 1_000_000)}
    val = {s.scene_id for s in scene_split(0, 50, 2_000_000)}
    other_seed = {s.scene_id for s in scene_split(1, 50, 1_000_000)}
    assert not train & val and not train & other_seed


def test_noise_seed_depends_on_scene_and_step():
    a, b = generate_scene(1, "easy"), generate_scene(1, "hard")
    assert step_noise_seed(11, a, 0) != step_noise_seed(11, b, 0) != step_noise_seed(11, a, 1)


def test_oracle_reference_ends_at_goal():
    s = generate_scene(3, "hard")
    ref = oracle_reference(s)
    assert np.allclose(ref[0], s.start) and np.linalg.norm(ref[-1] - s.goal) < 1e-9


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_from_epoch_one_to_ten(seed):
    cfg = load_config().train_config(seed=seed)
    cfg = dataclasses.replace(cfg, epochs=10, train_scenes=24, val_scenes=8)
    _, _, log = train_policy(cfg)
    train_loss = {r["epoch"]: r["loss"] for r in log if r["split"] == "train"}
    assert train_loss[10] < train_loss[1]
