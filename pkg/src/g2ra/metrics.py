"""Navigation metrics: NE, SR, OSR, SPL, DTW / nDTW / sDTW and turning-angle smoothness."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

SUCCESS_RADIUS = 20.0
SPLITS = ("full", "easy", "hard")
METRIC_NAMES = ("ne", "sr", "osr", "spl", "ndtw", "sdtw", "smooth_mean", "smooth_var")


class MetricError(ValueError):
    pass


@dataclass
class Trajectory:
    points: np.ndarray
    goal: np.ndarray
    success: bool
    shortest_path_length: float
    difficulty: str = "easy"
    scene_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(3)
        if len(self.points) < 1:
            raise MetricError("trajectory needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise MetricError("trajectory contains non-finite points")

    @classmethod
    def from_points(cls, points, goal, difficulty: str = "easy", scene_id: str = "",
                    success: Optional[bool] = None) -> "Trajectory":
        """Success from the final point; shortest path = straight line start to goal."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = np.asarray(goal, dtype=np.float64)
        if success is None:
            success = bool(np.linalg.norm(pts[-1] - g) < SUCCESS_RADIUS)
        return cls(pts, g, success, float(np.linalg.norm(g - pts[0])), difficulty, scene_id)

    @property
    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def navigation_error(traj: Trajectory) -> float:
    return float(np.linalg.norm(traj.points[-1] - traj.goal))


def _nonempty(episodes):
    episodes = list(episodes)
    if not episodes:
        raise MetricError("metric over an empty episode set")
    return episodes


def success_rate(episodes: Iterable[Trajectory], radius: float = SUCCESS_RADIUS) -> float:
    eps = _nonempty(episodes)
    return 100.0 * sum(navigation_error(t) < radius for t in eps) / len(eps)


def oracle_success(traj: Trajectory, radius: float = SUCCESS_RADIUS) -> bool:
    return bool(np.min(np.linalg.norm(traj.points - traj.goal, axis=1)) < radius)


def oracle_success_rate(episodes: Iterable[Trajectory], radius: float = SUCCESS_RADIUS) -> float:
    eps = _nonempty(episodes)
    return 100.0 * sum(oracle_success(t, radius) for t in eps) / len(eps)


def spl_term(traj: Trajectory) -> float:
    if not traj.success:
        return 0.0
    l = traj.shortest_path_length
    if l <= 0:
        if np.allclose(traj.points[0], traj.goal):
            return 1.0
        raise MetricError("shortest path length must be positive when start != goal")
    return l / max(traj.path_length, l)


def spl(episodes: Iterable[Trajectory]) -> float:
    eps = _nonempty(episodes)
    return 100.0 * float(np.mean([spl_term(t) for t in eps]))


def dtw(a, b) -> float:
    """Classical DTW, Euclidean point cost, steps (1,0), (0,1), (1,1), both ends aligned."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("dtw of an empty sequence")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row_cost = cost[i - 1]
        prev = acc[i - 1]
        cur = acc[i]
        for j in range(1, m + 1):
            cur[j] = row_cost[j - 1] + min(prev[j], cur[j - 1], prev[j - 1])
    return float(acc[n, m])


def ndtw(traj_points, ref_points, threshold: float = SUCCESS_RADIUS) -> float:
    ref = np.asarray(ref_points, dtype=np.float64).reshape(-1, 3)
    return 100.0 * math.exp(-dtw(traj_points, ref) / (len(ref) * threshold))


def sdtw(traj_points, ref_points, success: bool, threshold: float = SUCCESS_RADIUS) -> float:
    return ndtw(traj_points, ref_points, threshold) if success else 0.0


COLLINEAR_DEG = 1e-9


def turning_angles(points, min_segment: float = 1e-6) -> np.ndarray:
    """Angles (degrees) between consecutive non-degenerate displacement vectors.

    Uses atan2(|a x b|, a . b), which stays accurate near 0 and 180 degrees;
    turns below ``COLLINEAR_DEG`` are roundoff on collinear segments and read as 0.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    seg = np.diff(pts, axis=0)
    seg = seg[np.linalg.norm(seg, axis=1) >= min_segment]
    if len(seg) < 2:
        return np.empty(0)
    a, b = seg[:-1], seg[1:]
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.einsum("ij,ij->i", a, b)))
    return np.where(ang < COLLINEAR_DEG, 0.0, ang)


def smoothness(points) -> Optional[Tuple[float, float]]:
    """(mean, population variance) of turning angles, or None when undefined."""
    ang = turning_angles(points)
    if len(ang) == 0:
        return None
    return float(ang.mean()), float(ang.var())


@dataclass
class SplitMetrics:
    count: int
    ne: float
    sr: float
    osr: float
    spl: float
    ndtw: float
    sdtw: float
    smooth_mean: Optional[float]
    smooth_var: Optional[float]
    smooth_undefined: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MetricsReport:
    splits: Dict[str, SplitMetrics]
    dominance: Dict[str, bool] = field(default_factory=dict)

    def __getitem__(self, split: str) -> SplitMetrics:
        return self.splits[split]

    @property
    def full(self) -> SplitMetrics:
        return self.splits["full"]


def split_metrics(trajs: Sequence[Trajectory], refs: Sequence[np.ndarray]) -> SplitMetrics:
    smooth = [smoothness(t.points) for t in trajs]
    defined = [s for s in smooth if s is not None]
    return SplitMetrics(
        count=len(trajs),
        ne=float(np.mean([navigation_error(t) for t in trajs])),
        sr=success_rate(trajs),
        osr=oracle_success_rate(trajs),
        spl=spl(trajs),
        ndtw=float(np.mean([ndtw(t.points, r) for t, r in zip(trajs, refs)])),
        sdtw=float(np.mean([sdtw(t.points, r, t.success) for t, r in zip(trajs, refs)])),
        smooth_mean=float(np.mean([s[0] for s in defined])) if defined else None,
        smooth_var=float(np.mean([s[1] for s in defined])) if defined else None,
        smooth_undefined=len(smooth) - len(defined),
    )


def dominance(m: SplitMetrics, tol: float = 1e-9) -> Dict[str, bool]:
    return {
        "sr<=osr": m.sr <= m.osr + tol,
        "spl<=sr": m.spl <= m.sr + tol,
        "sdtw<=ndtw": m.sdtw <= m.ndtw + tol,
    }


def aggregate(trajs: Sequence[Trajectory], refs: Dict[str, np.ndarray]) -> MetricsReport:
    """Per-split metrics (easy, hard, and full = union); refs keyed by scene id.

    Episodes are sorted by scene id first so the report does not depend on
    input order.
    """
    trajs = sorted(_nonempty(trajs), key=lambda t: t.scene_id)
    missing = [t.scene_id for t in trajs if t.scene_id not in refs]
    if missing:
        raise MetricError(f"no reference path for scene(s) {missing[:5]}")
    ids = [t.scene_id for t in trajs]
    if len(set(ids)) != len(ids):
        raise MetricError("duplicate scene ids in episode set")
    out = {}
    groups = {"full": trajs, "easy": [t for t in trajs if t.difficulty == "easy"],
              "hard": [t for t in trajs if t.difficulty == "hard"]}
    for name, group in groups.items():
        if group:
            out[name] = split_metrics(group, [refs[t.scene_id] for t in group])
    dom = {}
    for name, m in out.items():
        for k, v in dominance(m).items():
            dom[f"{name}:{k}"] = v
    return MetricsReport(out, dom)


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.2f}"


def format_table(rows: Sequence[Tuple[str, SplitMetrics]], label: str = "split") -> str:
    """Aligned plain-text table, one row per (label, metrics)."""
    header = [label, "n", "NE", "SR", "OSR", "SPL", "NDTW", "SDTW", "SmMean", "SmVar"]
    body = [[name, str(m.count), _fmt(m.ne), _fmt(m.sr), _fmt(m.osr), _fmt(m.spl), _fmt(m.ndtw),
             _fmt(m.sdtw), _fmt(m.smooth_mean), _fmt(m.smooth_var)] for name, m in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    return "\n".join(lines) + "\n"


def report_rows(report: MetricsReport, **labels) -> List[dict]:
    rows = []
    for split in SPLITS:
        if split in report.splits:
            row = dict(labels)
            row["split"] = split
            row.update(report.splits[split].as_dict())
            rows.append(row)
    return rows


def dump_rows(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def load_rows(text: str) -> List[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
