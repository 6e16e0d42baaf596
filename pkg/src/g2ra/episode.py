"""Closed-loop waypoint episodes and their line-delimited record files."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .world import MAX_STEP, SceneSpec

SUCCESS_RADIUS = 20.0
EPISODE_FORMAT = "g2ra-episodes"
EPISODE_VERSION = 1
STEP_FIELDS = ("t", "x", "y", "z", "yaw", "dx", "dy", "dz", "stop_score")
HEADER_FIELDS = ("record", "scene_seed", "difficulty", "split", "start", "goal",
                 "success", "stop_step", "n_steps", "diagnostic")


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; values already in range are returned untouched."""
    if -math.pi < a <= math.pi:
        return a
    w = math.atan2(math.sin(a), math.cos(a))
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    @property
    def position(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @classmethod
    def at(cls, position, yaw: float = 0.0) -> "Pose":
        x, y, z = (float(v) for v in position)
        return cls(x, y, z, 0.0, 0.0, yaw)


def clip_step(delta, max_step: float = MAX_STEP) -> Tuple[np.ndarray, bool]:
    d = np.asarray(delta, dtype=np.float64).ravel()
    n = float(np.linalg.norm(d))
    if n > max_step:
        return d * (max_step / n), True
    return d, False


def step(pose: Pose, delta, max_step: float = MAX_STEP, warnings: Optional[list] = None) -> Pose:
    """Advance the waypoint by ``delta``; the UAV turns to face the motion."""
    d, clipped = clip_step(delta, max_step)
    if clipped and warnings is not None:
        warnings.append(f"step of length {np.linalg.norm(delta):.6g} clipped to {max_step}")
    yaw = pose.yaw
    if math.hypot(d[0], d[1]) > 1e-6:
        yaw = math.atan2(d[1], d[0])
    return Pose(pose.x + d[0], pose.y + d[1], pose.z + d[2], 0.0, 0.0, yaw)


def is_success(final, goal, radius: float = SUCCESS_RADIUS) -> bool:
    """Strictly inside the success radius."""
    return float(np.linalg.norm(np.subtract(final, goal))) < radius


@dataclass
class Episode:
    scene: SceneSpec
    states: List[Pose]
    deltas: List[Tuple[float, float, float]]
    stop_scores: List[float]
    stop_step: Optional[int]
    success: bool
    split: str = "unseen/easy"
    diagnostic: str = ""

    @property
    def waypoints(self) -> np.ndarray:
        return np.array([s.position for s in self.states])

    @property
    def goal(self):
        return self.scene.goal


# agent(scene, pose, t) -> (delta, stop_score) where stop_score is a probability
Agent = Callable[[SceneSpec, Pose, int], Tuple[np.ndarray, float]]


def run_episode(scene: SceneSpec, agent: Agent, max_steps: int = 60, stop_threshold: float = 0.5,
                min_step: float = 0.5, max_step: float = MAX_STEP, split: Optional[str] = None) -> Episode:
    """Roll ``agent`` out from the scene start until stop, stall, or the step limit.

    Each step's increment is applied before the stop test, so a stopping
    prediction still moves the waypoint once. ``max_steps`` steps give at
    most ``max_steps + 1`` states.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    pose = Pose.at(scene.start)
    states, deltas, scores = [pose], [], []
    stop_step, diagnostic = None, ""
    warns: list = []
    for t in range(max_steps):
        delta, score = agent(scene, pose, t)
        delta = np.asarray(delta, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(delta)) and math.isfinite(score)):
            diagnostic = f"non-finite prediction at step {t}"
            break
        d, _ = clip_step(delta, max_step)
        pose = step(pose, d, max_step, warns)
        states.append(pose)
        deltas.append(tuple(float(v) for v in d))
        scores.append(float(score))
        if score > stop_threshold or np.linalg.norm(d) < min_step:
            stop_step = t
            break
    success = not diagnostic and is_success(states[-1].position, scene.goal)
    if warns and not diagnostic:
        diagnostic = f"{len(warns)} step(s) clipped"
    return Episode(scene, states, deltas, scores, stop_step, success,
                   split or f"unseen/{scene.difficulty}", diagnostic)


# ---------------------------------------------------------------------------
# episode files
# ---------------------------------------------------------------------------


class EpisodeFormatError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def save_trajectories(episodes: Sequence[Episode], path):
    """One header line, then per episode a header record followed by step records.

    Step ``t`` holds the pose after ``t`` increments (``t = 0`` is the start,
    with zero delta). Scenes are embedded so the file is self-contained.
    """
    lines = [_dump({"format": EPISODE_FORMAT, "version": EPISODE_VERSION, "episodes": len(episodes)})]
    for ep in episodes:
        scene = asdict(ep.scene)
        scene["bounds"] = [list(b) for b in ep.scene.bounds]
        lines.append(_dump({
            "record": "episode", "scene_seed": ep.scene.seed, "difficulty": ep.scene.difficulty,
            "split": ep.split, "start": list(ep.scene.start), "goal": list(ep.scene.goal),
            "success": ep.success, "stop_step": ep.stop_step, "n_steps": len(ep.states),
            "diagnostic": ep.diagnostic, "scene": scene,
        }))
        for t, s in enumerate(ep.states):
            d = ep.deltas[t - 1] if t > 0 else (0.0, 0.0, 0.0)
            sc = ep.stop_scores[t - 1] if t > 0 else 0.0
            lines.append(_dump([t, s.x, s.y, s.z, s.yaw, d[0], d[1], d[2], sc]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectories(path) -> List[Episode]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise EpisodeFormatError(f"{path}: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise EpisodeFormatError(f"{path}:1: malformed header") from None
    if header.get("format") != EPISODE_FORMAT:
        raise EpisodeFormatError(f"{path}:1: not an episode file")
    if header.get("version") != EPISODE_VERSION:
        raise EpisodeFormatError(f"{path}:1: version {header.get('version')} != {EPISODE_VERSION}")
    if set(header) != {"format", "version", "episodes"}:
        raise EpisodeFormatError(f"{path}:1: unknown header fields {sorted(set(header) - {'format', 'version', 'episodes'})}")

    episodes: List[Episode] = []
    i = 1
    last_good = 1
    while i < len(lines):
        lineno = i + 1
        try:
            rec = json.loads(lines[i])
        except json.JSONDecodeError:
            raise EpisodeFormatError(f"{path}:{lineno}: malformed line (last good line {last_good})") from None
        if not isinstance(rec, dict) or rec.get("record") != "episode":
            raise EpisodeFormatError(f"{path}:{lineno}: expected episode header record")
        extra = set(rec) - set(HEADER_FIELDS) - {"scene"}
        if extra:
            raise EpisodeFormatError(f"{path}:{lineno}: unknown fields {sorted(extra)}")
        sd = rec["scene"]
        scene = SceneSpec(sd["seed"], sd["difficulty"], tuple(sd["start"]), tuple(sd["goal"]),
                          [tuple(p) for p in sd["landmarks"]], list(sd["categories"]),
                          [tuple(p) for p in sd["ground"]], tuple(tuple(b) for b in sd["bounds"]))
        n = rec["n_steps"]
        last_good = lineno
        states, deltas, scores = [], [], []
        for t in range(n):
            j = i + 1 + t
            if j >= len(lines):
                raise EpisodeFormatError(
                    f"{path}: truncated after line {len(lines)}; episode starting at line {lineno} "
                    f"expects {n} steps (last good line {last_good})")
            try:
                row = json.loads(lines[j])
            except json.JSONDecodeError:
                raise EpisodeFormatError(f"{path}:{j + 1}: malformed step (last good line {last_good})") from None
            if not isinstance(row, list) or len(row) != len(STEP_FIELDS) or row[0] != t:
                raise EpisodeFormatError(f"{path}:{j + 1}: bad step record (last good line {last_good})")
            _, x, y, z, yaw, dx, dy, dz, sc = row
            states.append(Pose(x, y, z, 0.0, 0.0, yaw))
            if t > 0:
                deltas.append((dx, dy, dz))
                scores.append(sc)
            last_good = j + 1
        episodes.append(Episode(scene, states, deltas, scores, rec["stop_step"], rec["success"],
                                rec["split"], rec["diagnostic"]))
        i += 1 + n
    if len(episodes) != header["episodes"]:
        raise EpisodeFormatError(f"{path}: header announces {header['episodes']} episodes, found {len(episodes)}")
    return episodes
