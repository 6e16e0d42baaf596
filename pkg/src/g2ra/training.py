"""Supervised training of the fusion block and decision head against the scripted oracle."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .episode import Episode, Pose, clip_step, run_episode, step
from .fusion import VARIANTS, G2raConfig, G2raParams, fuse_variant
from .tensor import Tape
from .world import (Encoders, PolicyConfig, PolicyParams, SceneSpec, generate_scene,
                    oracle_increment, predict_increment, stop_loss, trajectory_loss)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "full"
    seed: int = 0
    epochs: int = 3
    lr: float = 1e-2
    batch_size: int = 1
    train_scenes: int = 300
    val_scenes: int = 32
    ss_cap: float = 0.5
    cos_weight: float = 1.0
    stop_weight: float = 1.0
    stop_radius: float = 10.0
    grad_clip: float = 1.0
    select_best: bool = True
    train_max_steps: int = 60
    eval_max_steps: int = 60
    eta: Optional[float] = None
    alpha: Optional[float] = None
    noise_seed_2d: int = 11
    noise_seed_3d: int = 13
    fusion: G2raConfig = field(default_factory=G2raConfig)
    hidden: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if isinstance(self.fusion, dict):
            self.fusion = G2raConfig(**self.fusion)


def scene_split(seed: int, count: int, offset: int) -> List[SceneSpec]:
    """Alternating easy/hard scenes with seeds disjoint across splits."""
    out = []
    for i in range(count):
        diff = "easy" if i % 2 == 0 else "hard"
        out.append(generate_scene(offset + 1000 * seed + i, diff))
    return out


def init_models(cfg: TrainConfig) -> Tuple[G2raParams, PolicyParams]:
    fusion = G2raParams.init(cfg.fusion, seed=cfg.seed,
                             eta=0.5 if cfg.eta is None else cfg.eta,
                             gate=0.5 if cfg.alpha is None else cfg.alpha,
                             fixed_eta=cfg.eta, fixed_gate=cfg.alpha)
    policy = PolicyParams.init(PolicyConfig(d=cfg.fusion.d, hidden=cfg.hidden), seed=cfg.seed)
    return fusion, policy


def step_noise_seed(base: int, scene: SceneSpec, t: int) -> Tuple[int, ...]:
    return (base, scene.seed, 0 if scene.difficulty == "easy" else 1, t)


class ModelAgent:
    """Encoders + fusion variant + decision head, usable as an episode agent."""

    def __init__(self, fusion: G2raParams, policy: PolicyParams, variant: str,
                 encoders: Optional[Encoders] = None, noise_seed_2d: int = 11,
                 noise_seed_3d: int = 13):
        self.fusion, self.policy, self.variant = fusion, policy, variant
        self.encoders = encoders or Encoders(fusion.config.d_clip, fusion.config.d_agg)
        self.noise_seed_2d, self.noise_seed_3d = noise_seed_2d, noise_seed_3d

    def tokens(self, scene: SceneSpec, pose: Pose, t: int):
        f2d = self.encoders.encode_2d(scene, pose, step_noise_seed(self.noise_seed_2d, scene, t))
        f3d = self.encoders.encode_3d(scene, pose, step_noise_seed(self.noise_seed_3d, scene, t))
        return f2d, f3d

    def forward(self, scene: SceneSpec, pose: Pose, t: int, tape: Optional[Tape] = None):
        f2d, f3d = self.tokens(scene, pose, t)
        f_fuse, trace = fuse_variant(self.variant, f2d, f3d, self.fusion, tape)
        inc, stop = predict_increment(f_fuse, pose, self.policy, tape)
        return inc, stop, trace

    def __call__(self, scene: SceneSpec, pose: Pose, t: int):
        inc, stop, _ = self.forward(scene, pose, t)
        z = float(stop.data[0, 0])
        prob = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
        return inc.data[0], prob


def oracle_agent(scene: SceneSpec, pose: Pose, t: int):
    """Scripted policy: oracle increment, stop once the goal is reached."""
    d = oracle_increment(scene, pose.position)
    reached = np.linalg.norm(np.subtract(scene.goal, pose.position)) - np.linalg.norm(d) < 1e-9
    return d, 1.0 if reached else 0.0


def oracle_reference(scene: SceneSpec, max_steps: int = 200) -> np.ndarray:
    """Reference path for alignment metrics: the scripted oracle run to completion."""
    ep = run_episode(scene, oracle_agent, max_steps=max_steps)
    return ep.waypoints


def sample_loss(agent: ModelAgent, scene: SceneSpec, pose: Pose, t: int, cfg: TrainConfig,
                backward: bool = True):
    """Loss at one state; accumulates parameter gradients when ``backward``."""
    target = oracle_increment(scene, pose.position)
    dist = float(np.linalg.norm(np.subtract(scene.goal, pose.position)))
    label = 1.0 if dist < cfg.stop_radius else 0.0
    tape = Tape() if backward else None
    inc, stop, _ = agent.forward(scene, pose, t, tape)
    l_traj, g_traj = trajectory_loss(inc.data[0], target, cfg.cos_weight)
    l_stop, g_stop = stop_loss(stop.data[0, 0], label)
    if backward:
        tape.backward_many([(inc, g_traj[None]), (stop, [[cfg.stop_weight * g_stop]])])
    return l_traj + cfg.stop_weight * l_stop, inc.data[0], target, label


def trainable(fusion: G2raParams, policy: PolicyParams, variant: str):
    out = [fusion[n] for n in fusion.used_names(variant)]
    return out + list(policy.tensors.values())


def _sgd(params, lr: float, n: int, clip: float = 0.0):
    """Plain SGD on the batch-mean gradient, rescaled to global norm ``clip`` when larger."""
    s = lr / n
    if clip > 0:
        norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)) / n
        if norm > clip:
            s *= clip / norm
    for p in params:
        p.data -= s * p.grad
        p.zero_grad()


def rollout_states(agent: ModelAgent, scene: SceneSpec, cfg: TrainConfig, p_model: float,
                   rng: np.random.Generator, on_sample) -> None:
    """Walk one training episode, calling ``on_sample(pose, t)`` at each visited state.

    With probability ``p_model`` the next state follows the model's own
    prediction (scheduled sampling), otherwise the oracle's increment.
    """
    pose = Pose.at(scene.start)
    for t in range(cfg.train_max_steps):
        pred, target, label = on_sample(pose, t)
        if label:
            break
        use_model = p_model > 0 and rng.random() < p_model
        delta, _ = clip_step(pred if use_model else target)
        if np.linalg.norm(delta) < 1e-9:
            break
        pose = step(pose, delta)


def evaluate_loss(agent: ModelAgent, scenes: Sequence[SceneSpec], cfg: TrainConfig) -> float:
    total, n = 0.0, 0

    def on_sample(pose, t):
        nonlocal total, n
        loss, pred, target, label = sample_loss(agent, scene, pose, t, cfg, backward=False)
        total += loss
        n += 1
        return pred, target, label

    rng = np.random.default_rng(0)
    for scene in scenes:
        rollout_states(agent, scene, cfg, 0.0, rng, on_sample)
    return total / max(n, 1)


def nav_summary(episodes: Sequence[Episode]) -> Tuple[float, float]:
    ne = [float(np.linalg.norm(np.subtract(e.states[-1].position, e.goal))) for e in episodes]
    sr = [e.success for e in episodes]
    return float(np.mean(ne)), 100.0 * float(np.mean(sr))


def train_policy(cfg: TrainConfig, encoders: Optional[Encoders] = None, progress=None):
    """Train one variant; returns (fusion params, policy params, log rows).

    Log rows are dicts ``{epoch, split, loss, ne, sr}``; epoch 0 is the
    untrained model. Scheduled sampling ramps linearly from 0 at the first
    epoch to ``ss_cap`` at the last. With ``select_best`` the returned
    weights are those of the epoch with the highest validation SR (ties:
    lower validation loss), reported in a final ``split == "selected"`` row.
    """
    fusion, policy = init_models(cfg)
    agent = ModelAgent(fusion, policy, cfg.variant, encoders, cfg.noise_seed_2d, cfg.noise_seed_3d)
    train_scenes = scene_split(cfg.seed, cfg.train_scenes, 1_000_000)
    val_scenes = scene_split(cfg.seed, cfg.val_scenes, 2_000_000)
    params = trainable(fusion, policy, cfg.variant)
    for p in list(fusion.tensors.values()) + list(policy.tensors.values()):
        p.zero_grad()
    rng = np.random.default_rng([cfg.seed, 4242])
    log: List[dict] = []
    best = {"row": None, "weights": None}

    def validate(epoch, train_loss):
        val_loss = evaluate_loss(agent, val_scenes, cfg)
        eps = [run_episode(s, agent, cfg.eval_max_steps) for s in val_scenes]
        ne, sr = nav_summary(eps)
        if train_loss is not None:
            log.append({"epoch": epoch, "split": "train", "loss": train_loss, "ne": None, "sr": None})
        log.append({"epoch": epoch, "split": "val", "loss": val_loss, "ne": ne, "sr": sr})
        if progress:
            progress(log[-1])
        if best["row"] is None or (sr, -val_loss) > (best["row"]["sr"], -best["row"]["loss"]):
            best["row"] = log[-1]
            best["weights"] = (fusion.copy(), policy.copy())

    # epoch-0 train loss on a subset: the untrained model only needs a baseline
    validate(0, evaluate_loss(agent, train_scenes[:cfg.val_scenes], cfg))
    for epoch in range(1, cfg.epochs + 1):
        p_model = cfg.ss_cap * (epoch - 1) / max(cfg.epochs - 1, 1)
        total, count, pending, batch_no = 0.0, 0, 0, 0
        for idx in rng.permutation(len(train_scenes)):
            scene = train_scenes[idx]

            def on_sample(pose, t):
                nonlocal total, count, pending, batch_no
                loss, pred, target, label = sample_loss(agent, scene, pose, t, cfg)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {batch_no}")
                total += loss
                count += 1
                pending += 1
                if pending == cfg.batch_size:
                    _sgd(params, cfg.lr, pending, cfg.grad_clip)
                    pending = 0
                    batch_no += 1
                return pred, target, label

            rollout_states(agent, scene, cfg, p_model, rng, on_sample)
        if pending:
            _sgd(params, cfg.lr, pending, cfg.grad_clip)
        validate(epoch, total / max(count, 1))
    if cfg.select_best:
        fusion, policy = best["weights"]
        log.append(dict(best["row"], split="selected"))
    return fusion, policy, log


def format_log(log: Sequence[dict]) -> str:
    """JSON-lines training log (one row per epoch and split)."""
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in log)
