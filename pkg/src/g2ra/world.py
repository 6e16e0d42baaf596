"""Procedural scenes, stand-in encoders, scripted oracle, decision head and loss.

The world is built so that the two token streams carry different cues:

* 2-D tokens (5 views x 8 slots) describe visible objects by category and
  world-frame bearing only; range never enters them.
* 3-D tokens carry pose-relative offsets and ranges of the goal, landmarks
  and ground samples, each tagged with a fixed geometric signature. All kinds
  share one offset subspace, so pooling them blurs the goal into clutter
  while attention can pick it out.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .fusion import glorot
from .tensor import ParamTensor, Tape, TokenMatrix

BOUNDS = ((0.0, 400.0), (0.0, 400.0), (0.0, 120.0))
VIEWS = ("front", "rear", "left", "right", "down")
TOKENS_PER_VIEW = 8
N_2D = len(VIEWS) * TOKENS_PER_VIEW
N_3D = 60
N_CATEGORIES = 6  # 0 is the goal marker
LANDMARK_RADIUS = 8.0
MAX_STEP = 5.0
DIFFICULTY_RANGES = {"easy": (40.0, 120.0), "hard": (120.0, 300.0)}
LANDMARK_COUNTS = {"easy": (6, 10), "hard": (14, 20)}
ENCODER_SEED = 20240613
OFFSET_SCALE = 100.0
SIGNATURE_DIM = 8
# kinds in the 3-D stream: goal, landmark categories 1..5, ground sample
KIND_GOAL, KIND_GROUND = 0, N_CATEGORIES
FEAT_2D = N_CATEGORIES + 3 + len(VIEWS) + 2
FEAT_3D = 3 + 1 + SIGNATURE_DIM + 1
SCENE_FORMAT = "g2ra-scene"
SCENE_VERSION = 1


@dataclass
class SceneSpec:
    seed: int
    difficulty: str
    start: Tuple[float, float, float]
    goal: Tuple[float, float, float]
    landmarks: List[Tuple[float, float, float]]
    categories: List[int]
    ground: List[Tuple[float, float, float]]
    bounds: Tuple[Tuple[float, float], ...] = BOUNDS

    @property
    def start_goal_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.goal, self.start)))

    def inside(self, p) -> bool:
        return all(lo <= x <= hi for x, (lo, hi) in zip(p, self.bounds))

    @property
    def scene_id(self) -> str:
        return f"{self.difficulty}-{self.seed}"


def _uniform_point(rng, margin_xy, z_range):
    (x0, x1), (y0, y1), _ = BOUNDS
    return np.array([
        rng.uniform(x0 + margin_xy, x1 - margin_xy),
        rng.uniform(y0 + margin_xy, y1 - margin_xy),
        rng.uniform(*z_range),
    ])


def generate_scene(seed: int, difficulty: str = "easy") -> SceneSpec:
    if difficulty not in DIFFICULTY_RANGES:
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    rng = np.random.default_rng([seed, 0 if difficulty == "easy" else 1])
    lo, hi = DIFFICULTY_RANGES[difficulty]
    while True:
        start = _uniform_point(rng, 20.0, (20.0, 100.0))
        dist = rng.uniform(lo, hi)
        heading = rng.uniform(-math.pi, math.pi)
        dz = rng.uniform(-20.0, 20.0)
        horiz = math.sqrt(max(dist**2 - dz**2, 0.0))
        goal = start + np.array([horiz * math.cos(heading), horiz * math.sin(heading), dz])
        if (10.0 <= goal[0] <= 390.0 and 10.0 <= goal[1] <= 390.0 and 10.0 <= goal[2] <= 110.0):
            break
    n_lo, n_hi = LANDMARK_COUNTS[difficulty]
    n = int(rng.integers(n_lo, n_hi + 1))
    landmarks, cats = [], []
    while len(landmarks) < n:
        p = _uniform_point(rng, 10.0, (20.0, 100.0))
        if np.linalg.norm(p - start) < 30.0 or np.linalg.norm(p - goal) < 30.0:
            continue
        landmarks.append(tuple(float(x) for x in p))
        cats.append(int(rng.integers(1, N_CATEGORIES)))
    n_ground = N_3D - 1 - n
    ground = [(float(rng.uniform(0, 400)), float(rng.uniform(0, 400)), 0.0) for _ in range(n_ground)]
    return SceneSpec(seed, difficulty, tuple(float(x) for x in start), tuple(float(x) for x in goal),
                     landmarks, cats, ground)


# ---------------------------------------------------------------------------
# scene files: line-delimited JSON, header line then one line per scene
# ---------------------------------------------------------------------------


def save_scenes(scenes: Sequence[SceneSpec], path):
    lines = [json.dumps({"format": SCENE_FORMAT, "version": SCENE_VERSION, "count": len(scenes)})]
    for s in scenes:
        d = asdict(s)
        d["bounds"] = [list(b) for b in s.bounds]
        lines.append(json.dumps(d))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scenes(path) -> List[SceneSpec]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty scene file")
    header = json.loads(lines[0])
    if header.get("format") != SCENE_FORMAT or header.get("version") != SCENE_VERSION:
        raise ValueError(f"{path}: unsupported scene header {header}")
    out = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            out.append(SceneSpec(
                d["seed"], d["difficulty"], tuple(d["start"]), tuple(d["goal"]),
                [tuple(p) for p in d["landmarks"]], list(d["categories"]),
                [tuple(p) for p in d["ground"]], tuple(tuple(b) for b in d["bounds"]),
            ))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{i}: malformed scene record ({exc})") from None
    if len(out) != header["count"]:
        raise ValueError(f"{path}: header says {header['count']} scenes, found {len(out)}")
    return out


# ---------------------------------------------------------------------------
# stand-in encoders
# ---------------------------------------------------------------------------


class Encoders:
    """Fixed random projections for the two synthetic token streams."""

    def __init__(self, d_clip: int = 96, d_agg: int = 128, noise_2d: float = 0.02,
                 noise_3d: float = 0.02, seed: int = ENCODER_SEED, signature_scale: float = 3.0):
        rng = np.random.default_rng(seed)
        self.d_clip, self.d_agg = d_clip, d_agg
        self.proj_2d = rng.normal(size=(FEAT_2D, d_clip)) / math.sqrt(FEAT_2D)
        self.proj_3d = rng.normal(size=(FEAT_3D, d_agg)) / math.sqrt(FEAT_3D)
        sig = rng.normal(size=(N_CATEGORIES + 1, SIGNATURE_DIM))
        self.signatures = signature_scale * sig / np.linalg.norm(sig, axis=1, keepdims=True)
        self.noise_2d, self.noise_3d = noise_2d, noise_3d

    def features_2d(self, scene: SceneSpec, pose) -> np.ndarray:
        """Pre-projection 2-D features, one row per token slot."""
        pos = np.asarray(pose.position)
        objects = np.vstack([np.asarray(scene.goal)[None], np.asarray(scene.landmarks).reshape(-1, 3)])
        cats = np.array([0] + list(scene.categories))
        rel = objects - pos
        dist = np.linalg.norm(rel, axis=1)
        keep = dist > 1e-6
        bearing = np.zeros_like(rel)
        bearing[keep] = rel[keep] / dist[keep, None]
        view = view_index(bearing, pose.yaw)
        azim = np.arctan2(bearing[:, 1], bearing[:, 0]) - pose.yaw
        azim = np.arctan2(np.sin(azim), np.cos(azim))
        feats = np.zeros((N_2D, FEAT_2D))
        feats[:, -1] = 1.0
        for v in range(len(VIEWS)):
            idx = np.flatnonzero((view == v) & keep)
            # slot order by category then azimuth, never by range
            idx = idx[np.lexsort((azim[idx], cats[idx]))][:TOKENS_PER_VIEW]
            rows = v * TOKENS_PER_VIEW + np.arange(len(idx))
            feats[rows, cats[idx]] = 1.0
            feats[rows, N_CATEGORIES:N_CATEGORIES + 3] = bearing[idx]
            feats[rows, N_CATEGORIES + 3 + v] = 1.0
            feats[rows, -2] = 1.0
        return feats

    def features_3d(self, scene: SceneSpec, pose) -> np.ndarray:
        pos = np.asarray(pose.position)
        pts = np.vstack([np.asarray(scene.goal)[None], np.asarray(scene.landmarks).reshape(-1, 3),
                         np.asarray(scene.ground).reshape(-1, 3)])
        kinds = np.array([KIND_GOAL] + list(scene.categories) + [KIND_GROUND] * len(scene.ground))
        rel = pts - pos
        feats = np.zeros((len(pts), FEAT_3D))
        feats[:, :3] = rel / OFFSET_SCALE
        feats[:, 3] = np.linalg.norm(rel, axis=1) / OFFSET_SCALE
        feats[:, 4:4 + SIGNATURE_DIM] = self.signatures[kinds]
        feats[:, -1] = 1.0
        return feats

    def encode_2d(self, scene: SceneSpec, pose, noise_seed: Optional[int] = None) -> TokenMatrix:
        out = self.features_2d(scene, pose) @ self.proj_2d
        if noise_seed is not None and self.noise_2d > 0:
            out += self.noise_2d * np.random.default_rng(_seed_list(noise_seed) + [2]).normal(size=out.shape)
        return TokenMatrix(out)

    def encode_3d(self, scene: SceneSpec, pose, noise_seed: Optional[int] = None) -> TokenMatrix:
        out = self.features_3d(scene, pose) @ self.proj_3d
        if noise_seed is not None and self.noise_3d > 0:
            out += self.noise_3d * np.random.default_rng(_seed_list(noise_seed) + [3]).normal(size=out.shape)
        return TokenMatrix(out)

    def decode_3d_offsets(self, tokens: np.ndarray) -> np.ndarray:
        """Fixed linear decoder: recover per-token offsets (m) from noiseless 3-D tokens."""
        feats = np.asarray(tokens) @ np.linalg.pinv(self.proj_3d)
        return feats[:, :3] * OFFSET_SCALE


def _seed_list(seed) -> list:
    return [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]


def view_index(bearing: np.ndarray, yaw: float) -> np.ndarray:
    """Camera index (front/rear/left/right/down) for world-frame unit bearings."""
    horiz = np.hypot(bearing[:, 0], bearing[:, 1])
    elev = np.arctan2(bearing[:, 2], horiz)
    azim = np.arctan2(bearing[:, 1], bearing[:, 0]) - yaw
    azim = np.arctan2(np.sin(azim), np.cos(azim))
    view = np.full(len(bearing), 1)  # rear
    view[np.abs(azim) <= math.pi / 4] = 0
    view[(azim > math.pi / 4) & (azim <= 3 * math.pi / 4)] = 2
    view[(azim < -math.pi / 4) & (azim >= -3 * math.pi / 4)] = 3
    view[elev < -math.pi / 4] = 4
    return view


def encode_2d(scene: SceneSpec, pose, encoders: Optional[Encoders] = None,
              noise_seed: Optional[int] = None) -> TokenMatrix:
    return (encoders or default_encoders()).encode_2d(scene, pose, noise_seed)


def encode_3d(scene: SceneSpec, pose, encoders: Optional[Encoders] = None,
              noise_seed: Optional[int] = None) -> TokenMatrix:
    return (encoders or default_encoders()).encode_3d(scene, pose, noise_seed)


_DEFAULT_ENCODERS: Optional[Encoders] = None


def default_encoders() -> Encoders:
    global _DEFAULT_ENCODERS
    if _DEFAULT_ENCODERS is None:
        _DEFAULT_ENCODERS = Encoders()
    return _DEFAULT_ENCODERS


# ---------------------------------------------------------------------------
# scripted oracle
# ---------------------------------------------------------------------------


def oracle_increment(scene: SceneSpec, position, max_step: float = MAX_STEP,
                     clearance: float = 10.0) -> np.ndarray:
    """Straight-line step toward the goal, bent away from nearby landmark spheres."""
    pos = np.asarray(position, dtype=np.float64)
    to_goal = np.asarray(scene.goal) - pos
    dist = float(np.linalg.norm(to_goal))
    if dist < 1e-9:
        return np.zeros(3)
    heading = to_goal / dist
    push = np.zeros(3)
    reach = LANDMARK_RADIUS + clearance
    for c in scene.landmarks:
        away = pos - np.asarray(c)
        dd = float(np.linalg.norm(away))
        if dd < reach and dd > 1e-9 and np.dot(heading, -away) > 0:
            push += (away / dd) * (reach - dd) / clearance
    direction = heading + push
    n = np.linalg.norm(direction)
    direction = heading if n < 1e-9 else direction / n
    return min(max_step, dist) * direction


# ---------------------------------------------------------------------------
# decision head
# ---------------------------------------------------------------------------

STATE_FREQS = (1.0, 2.0, 4.0)
STATE_DIM = 3 * 2 * len(STATE_FREQS) + 2


def state_embedding(pose) -> np.ndarray:
    """Sinusoidal features of position and yaw; roll/pitch are always zero here."""
    p = np.asarray(pose.position) / OFFSET_SCALE
    feats = []
    for f in STATE_FREQS:
        feats.append(np.sin(f * p))
        feats.append(np.cos(f * p))
    feats.append([math.sin(pose.yaw), math.cos(pose.yaw)])
    return np.concatenate(feats)


@dataclass(frozen=True)
class PolicyConfig:
    d: int = 64
    state_dim: int = STATE_DIM
    hidden: int = 64
    max_step: float = MAX_STEP


class PolicyParams:
    """Two-layer head: [pooled F_fuse | state] -> hidden -> (3-D increment, stop logit)."""

    def __init__(self, config: PolicyConfig, tensors):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: PolicyConfig, seed: int = 0) -> "PolicyParams":
        rng = np.random.default_rng([seed, 7])
        n_in = config.d + config.state_dim
        t = {
            "w1": ParamTensor("w1", glorot(rng, n_in, config.hidden)),
            "b1": ParamTensor("b1", np.zeros((1, config.hidden))),
            "w2": ParamTensor("w2", glorot(rng, config.hidden, 4)),
            "b2": ParamTensor("b2", np.zeros((1, 4))),
        }
        return cls(config, t)

    @classmethod
    def zeros(cls, config: PolicyConfig) -> "PolicyParams":
        p = cls.init(config)
        for t in p.tensors.values():
            t.data[...] = 0.0
        return p

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, {k: ParamTensor(k, v.data.copy()) for k, v in self.tensors.items()})


def predict_increment(f_fuse: TokenMatrix, state, p: PolicyParams, tape: Optional[Tape] = None):
    """Returns (increment node 1x3, stop-logit node 1x1); ``state`` is a Pose."""
    pooled = T.mean_pool_rows(f_fuse, tape)
    s = T.constant(state_embedding(state)[None])
    x = T.hconcat([pooled, s], tape)
    h = T.relu(T.add(T.matmul(x, p["w1"], tape), p["b1"], tape), tape)
    out = T.add(T.matmul(h, p["w2"], tape), p["b2"], tape)
    raw, stop = T.split_cols(out, 3, tape)
    return T.norm_squash(raw, p.config.max_step, tape), stop


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def trajectory_loss(pred, target, weight: float = 1.0, eps: float = 1e-8):
    """L1 distance plus ``weight`` * (1 - cosine); returns (loss, d loss / d pred).

    The cosine term is dropped when the target is (numerically) zero. The
    input precision is kept so the extended-precision oracle can reuse it.
    """
    pred = np.asarray(pred).ravel()
    pred = pred.astype(np.result_type(pred, np.float64))
    target = np.asarray(target, dtype=pred.dtype).ravel()
    diff = pred - target
    loss = np.abs(diff).sum()
    grad = np.sign(diff)
    tn = np.sqrt(target @ target)
    if tn >= eps:
        pn = np.sqrt(pred @ pred)
        if pn >= eps:
            cos = (pred @ target) / (pn * tn)
            loss += weight * (1.0 - cos)
            grad = grad - weight * (target / (pn * tn) - cos * pred / pn**2)
        else:
            loss += weight
    return loss, grad


def stop_loss(logit, label: float):
    """Binary cross-entropy on the stop logit; returns (loss, d loss / d logit)."""
    z = np.asarray(logit)
    z = z.astype(np.result_type(z, np.float64))
    e = np.exp(-np.abs(z))
    loss = np.maximum(z, 0.0) - z * label + np.log1p(e)
    prob = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return loss[()], prob[()] - label
