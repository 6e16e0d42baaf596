"""Runners behind the CLI subcommands: gradcheck, train, eval, ablate, sweep, response dumps."""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import GradcheckSection, RunConfig
from .episode import Episode, Pose, load_trajectories, run_episode, save_trajectories, step
from .fusion import (G2raConfig, G2raParams, fuse_variant, load_checkpoint, save_checkpoint)
from .metrics import (MetricsReport, Trajectory, aggregate, dump_rows, format_table,
                      report_rows)
from .training import (ModelAgent, TrainConfig, format_log, oracle_agent, oracle_reference,
                       train_policy)
from .world import (N_2D, TOKENS_PER_VIEW, VIEWS, Encoders, PolicyConfig, PolicyParams,
                    generate_scene, oracle_increment, predict_increment, stop_loss,
                    trajectory_loss)

# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def _extended(tensors: Dict[str, T.ParamTensor]) -> Dict[str, T.ParamTensor]:
    return {k: T.ParamTensor(k, v.data.astype(np.longdouble)) for k, v in tensors.items()}


def gradcheck(section: GradcheckSection = GradcheckSection(), variant: str = "full",
              seed: int = 0) -> List[Tuple[str, float, float]]:
    """Worst relative error per parameter, analytic gradient vs central differences.

    The objective is the training loss (trajectory loss + stop term) of the
    fusion variant followed by the decision head, at random inputs and
    randomized parameters. Rows are ``(name, err, err_double)``: ``err``
    compares the float64 analytic gradient with differences of the same
    objective evaluated in extended precision, ``err_double`` with
    differences evaluated in float64. The float64 differences carry roundoff
    of about ulp(loss) / 2h, which dominates for entries whose true gradient
    is zero (the key bias: softmax ignores a per-row shift). The last row
    checks the trajectory loss's own gradient with respect to the prediction.
    """
    rng = np.random.default_rng([seed, 31])
    cfg = G2raConfig(section.d_clip, section.d_agg, section.d, section.heads)
    fusion = G2raParams.init(cfg, seed=seed)
    policy = PolicyParams.init(PolicyConfig(d=section.d, hidden=section.hidden), seed=seed)
    for p in list(fusion.tensors.values()) + list(policy.tensors.values()):
        if p.name.startswith("b") or p.name.endswith("_b"):
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    x2d = rng.normal(size=(section.n_2d, section.d_clip))
    x3d = rng.normal(size=(section.n_3d, section.d_agg))
    pose = Pose(*rng.uniform(0, 100, size=3), 0.0, 0.0, rng.uniform(-math.pi, math.pi))
    target = rng.normal(size=3) * 2.0

    def loss_of(fu, po, f2d, f3d, tape=None):
        out, _ = fuse_variant(variant, f2d, f3d, fu, tape)
        inc, stop = predict_increment(out, pose, po, tape)
        return inc, stop

    def objective(fu, po, f2d, f3d):
        def f():
            inc, stop = loss_of(fu, po, f2d, f3d)
            return trajectory_loss(inc.data[0], target)[0] + stop_loss(stop.data[0, 0], 1.0)[0]
        return f

    names = fusion.used_names(variant)
    params = [fusion[n] for n in names] + list(policy.tensors.values())
    for p in params:
        p.zero_grad()
    tape = T.Tape()
    inc, stop = loss_of(fusion, policy, T.TokenMatrix(x2d), T.TokenMatrix(x3d), tape)
    _, g_inc = trajectory_loss(inc.data[0], target)
    _, g_stop = stop_loss(stop.data[0, 0], 1.0)
    tape.backward_many([(inc, g_inc[None]), (stop, [[g_stop]])])
    num64 = T.finite_difference_gradient(
        objective(fusion, policy, T.TokenMatrix(x2d), T.TokenMatrix(x3d)), params, section.h)

    fu_x = G2raParams(cfg, _extended(fusion.tensors), fusion.fixed_eta, fusion.fixed_gate)
    po_x = PolicyParams(policy.config, _extended(policy.tensors))
    params_x = [fu_x[n] for n in names] + list(po_x.tensors.values())
    num_x = T.finite_difference_gradient(
        objective(fu_x, po_x, T.TokenMatrix(x2d.astype(np.longdouble)),
                  T.TokenMatrix(x3d.astype(np.longdouble))), params_x, section.h)

    rows = [(p.name, float(T.relative_error(p.grad, num_x[p.name]).max()),
             float(T.relative_error(p.grad, num64[p.name]).max())) for p in params]

    errs = []
    for dtype in (np.longdouble, np.float64):
        pred = T.TokenMatrix(inc.data.astype(dtype), name="trajectory_loss.pred")
        analytic = trajectory_loss(inc.data[0], target)[1]
        numeric = T.finite_difference_gradient(
            lambda: trajectory_loss(pred.data[0], target)[0], [pred], section.h)
        errs.append(float(T.relative_error(analytic, numeric[pred.name][0]).max()))
    rows.append(("trajectory_loss.pred", *errs))
    return rows


def format_gradcheck(rows: Sequence[Tuple[str, float, float]], tol: float) -> str:
    width = max(len(r[0]) for r in rows)
    lines = [f"{'parameter'.ljust(width)}  max_rel_err  (fd in float64)  status"]
    for name, err, err64 in rows:
        lines.append(f"{name.ljust(width)}  {err:11.3e}  {err64:15.3e}  {'PASS' if err < tol else 'FAIL'}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def run_train(tcfg: TrainConfig, out_dir, progress=None):
    """Train one model and write ``checkpoint.json`` and ``train_log.jsonl`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fusion, policy, log = train_policy(tcfg, progress=progress)
    save_checkpoint(out / "checkpoint.json", fusion, policy,
                    extra={"variant": tcfg.variant, "train": _train_meta(tcfg)})
    (out / "train_log.jsonl").write_text(format_log(log))
    return fusion, policy, log


def _train_meta(tcfg: TrainConfig) -> dict:
    d = dataclasses.asdict(tcfg)
    d.pop("fusion")
    return d


def load_agent(checkpoint, expect: Optional[G2raConfig] = None, eta=None, alpha=None) -> ModelAgent:
    fusion, policy_tensors, policy_cfg, extra = load_checkpoint(checkpoint, expect)
    policy = PolicyParams(PolicyConfig(**policy_cfg), policy_tensors)
    if eta is not None:
        fusion.fixed_eta = eta
    if alpha is not None:
        fusion.fixed_gate = alpha
    meta = extra.get("train", {})
    return ModelAgent(fusion, policy, extra.get("variant", "full"),
                      noise_seed_2d=meta.get("noise_seed_2d", 11),
                      noise_seed_3d=meta.get("noise_seed_3d", 13))


def eval_scenes(cfg: RunConfig):
    n = cfg.eval.episodes_per_split
    off = cfg.eval.scene_offset
    return ([generate_scene(off + i, "easy") for i in range(n)]
            + [generate_scene(off + i, "hard") for i in range(n)])


def run_episodes(agent, scenes, cfg: RunConfig) -> List[Episode]:
    return [run_episode(s, agent, cfg.eval.max_steps, cfg.eval.stop_threshold) for s in scenes]


def episodes_report(episodes: Sequence[Episode]) -> MetricsReport:
    trajs, refs = [], {}
    for ep in episodes:
        sid = ep.scene.scene_id
        trajs.append(Trajectory(ep.waypoints, ep.goal, ep.success,
                                float(np.linalg.norm(np.subtract(ep.goal, ep.scene.start))),
                                ep.scene.difficulty, sid))
        refs[sid] = oracle_reference(ep.scene)
    return aggregate(trajs, refs)


def write_report(report: MetricsReport, out_dir, stem: str = "report", **labels):
    out = Path(out_dir)
    rows = [(s, report.splits[s]) for s in ("full", "easy", "hard") if s in report.splits]
    (out / f"{stem}.txt").write_text(format_table(rows))
    (out / f"{stem}.jsonl").write_text(dump_rows(report_rows(report, **labels)))


def run_eval(cfg: RunConfig, checkpoint, out_dir) -> MetricsReport:
    """Evaluate a checkpoint (or the scripted oracle when ``checkpoint == "oracle"``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if str(checkpoint) == "oracle":
        agent = oracle_agent
    else:
        agent = load_agent(checkpoint, cfg.fusion, cfg.train.eta, cfg.train.alpha)
    episodes = run_episodes(agent, eval_scenes(cfg), cfg)
    save_trajectories(episodes, out / "episodes.jsonl")
    report = episodes_report(episodes)
    write_report(report, out)
    return report


def recompute_report(episodes_path, out_dir) -> MetricsReport:
    episodes = load_trajectories(episodes_path)
    report = episodes_report(episodes)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# ablation and sweep
# ---------------------------------------------------------------------------


def _job(args):
    tcfg, cfg, job_dir = args
    fusion, policy, _ = run_train(tcfg, job_dir)
    agent = ModelAgent(fusion, policy, tcfg.variant, noise_seed_2d=tcfg.noise_seed_2d,
                       noise_seed_3d=tcfg.noise_seed_3d)
    episodes = run_episodes(agent, eval_scenes(cfg), cfg)
    save_trajectories(episodes, Path(job_dir) / "episodes.jsonl")
    report = episodes_report(episodes)
    write_report(report, job_dir)
    return report


def _run_jobs(jobs, n_workers: int, progress=None):
    if n_workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(n_workers) as pool:
            return list(pool.map(_job, jobs))
    out = []
    for i, job in enumerate(jobs):
        out.append(_job(job))
        if progress:
            progress(i + 1, len(jobs), job[2])
    return out


def mean_rows(rows: Sequence[dict]) -> dict:
    """Average numeric metric fields across seeds; undefined values are skipped."""
    out = {}
    for key in rows[0]:
        vals = [r[key] for r in rows]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            out[key] = float(np.mean(vals))
        elif all(v is None or isinstance(v, (int, float)) for v in vals):
            nums = [v for v in vals if v is not None]
            out[key] = float(np.mean(nums)) if nums else None
        else:
            out[key] = vals[0]
    return out


def run_ablate(cfg: RunConfig, progress=None) -> List[dict]:
    """Train/evaluate every variant for every seed on one shared episode set.

    Writes ``ablation.jsonl`` (per seed and seed-mean rows) and an aligned
    ``ablation.txt`` table of the seed means.
    """
    out = Path(cfg.out)
    jobs = []
    for variant in cfg.ablate.variants:
        for seed in cfg.ablate.seeds:
            jobs.append((cfg.train_config(variant, seed), cfg, out / variant / f"seed{seed}"))
    reports = _run_jobs(jobs, cfg.jobs, progress)
    rows, summary = [], []
    for (tcfg, _, _), rep in zip(jobs, reports):
        rows.extend(report_rows(rep, variant=tcfg.variant, seed=tcfg.seed))
    for variant in cfg.ablate.variants:
        for split in ("full", "easy", "hard"):
            group = [r for r in rows if r["variant"] == variant and r["split"] == split]
            if group:
                m = mean_rows(group)
                m["seed"] = "mean"
                summary.append(m)
    (out / "ablation.jsonl").write_text(dump_rows(rows + summary))
    (out / "ablation.txt").write_text(format_summary(summary, "variant"))
    return summary


def format_summary(rows: Sequence[dict], key: str, marker: Optional[Callable[[dict], bool]] = None) -> str:
    cols = ["ne", "sr", "osr", "spl", "ndtw", "sdtw", "smooth_mean", "smooth_var"]
    header = [key, "split"] + [c.upper() for c in cols]
    body = []
    for r in rows:
        label = str(r[key]) + (" *" if marker and marker(r) else "")
        body.append([label, r["split"]] + ["-" if r[c] is None else f"{r[c]:.2f}" for c in cols])
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(x, widths)))
                     for x in [header] + body) + "\n"


def best_cell(rows: Sequence[dict]) -> Tuple[float, float]:
    """Best (eta, alpha) on the full split: highest SR, then lowest NE, then grid order."""
    full = [r for r in rows if r["split"] == "full"]
    best = min(full, key=lambda r: (-r["sr"], r["ne"]))
    return best["eta"], best["alpha"]


def run_sweep(cfg: RunConfig, progress=None) -> List[dict]:
    """Fixed-(eta, alpha) training per grid cell from one shared initialization seed.

    Writes ``sweep.jsonl`` (one row per cell and split, ``best`` flagged),
    ``sweep.txt``, a tab-separated ``sweep_grid.tsv`` for plotting, and the
    response maps of each cell under ``cells/``.
    """
    out = Path(cfg.out)
    jobs, cells = [], []
    for eta in cfg.sweep.eta:
        for alpha in cfg.sweep.alpha:
            cell_dir = out / "cells" / f"eta{eta:g}_alpha{alpha:g}"
            jobs.append((cfg.train_config(cfg.variant, cfg.seed, eta=eta, alpha=alpha), cfg, cell_dir))
            cells.append((eta, alpha, cell_dir))
    reports = _run_jobs(jobs, cfg.jobs, progress)
    rows = []
    for (eta, alpha, cell_dir), rep in zip(cells, reports):
        rows.extend(report_rows(rep, eta=eta, alpha=alpha))
        run_dump(cfg, cell_dir / "checkpoint.json", cell_dir / "responses")
    b_eta, b_alpha = best_cell(rows)
    for r in rows:
        r["best"] = r["eta"] == b_eta and r["alpha"] == b_alpha
    (out / "sweep.jsonl").write_text(dump_rows(rows))
    (out / "sweep.txt").write_text(format_sweep(rows))
    (out / "sweep_grid.tsv").write_text(sweep_grid_tsv(rows))
    return rows


def format_sweep(rows: Sequence[dict]) -> str:
    for r in rows:
        r["cell"] = f"eta={r['eta']:g} alpha={r['alpha']:g}"
    text = format_summary(rows, "cell", marker=lambda r: r["best"])
    for r in rows:
        del r["cell"]
    return text + "* best cell (highest full-split SR, ties broken by lower NE)\n"


GRID_COLUMNS = ("eta", "alpha", "split", "ne", "sr", "osr", "spl", "best")


def sweep_grid_tsv(rows: Sequence[dict]) -> str:
    lines = ["\t".join(GRID_COLUMNS)]
    for r in rows:
        lines.append("\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in GRID_COLUMNS))
    return "\n".join(lines) + "\n"


def parse_sweep_grid(text: str) -> List[dict]:
    lines = text.splitlines()
    if not lines or tuple(lines[0].split("\t")) != GRID_COLUMNS:
        raise ValueError("not a sweep grid file")
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        row = dict(zip(GRID_COLUMNS, vals))
        for k in ("eta", "alpha", "ne", "sr", "osr", "spl"):
            row[k] = float(row[k])
        row["best"] = row["best"] == "True"
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# token response maps
# ---------------------------------------------------------------------------

RESPONSE_MAPS = ("q_before_gpi", "q_after_gpi", "fused_after_gar", "delta_gpi", "delta_gar")


def response_maps(trace) -> Dict[str, np.ndarray]:
    """Per-token L2 norms of Q_base, Q_inj, F_fuse and their signed differences.

    Each map is shaped (views, tokens per view). ``delta_gpi`` is
    |Q_inj| - |Q_base| and ``delta_gar`` is |F_fuse| - |Q_inj|.
    """
    def norms(m):
        return np.linalg.norm(m.data, axis=1).reshape(len(VIEWS), TOKENS_PER_VIEW)

    q0, q1, f = norms(trace.q_base), norms(trace.q_inj), norms(trace.f_fuse)
    return {"q_before_gpi": q0, "q_after_gpi": q1, "fused_after_gar": f,
            "delta_gpi": q1 - q0, "delta_gar": f - q1}


def format_map(grid: np.ndarray) -> str:
    lines = ["view\t" + "\t".join(f"t{i}" for i in range(grid.shape[1]))]
    for v, row in zip(VIEWS, grid):
        lines.append(v + "\t" + "\t".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def parse_map(text: str) -> np.ndarray:
    lines = text.splitlines()[1:]
    return np.array([[float(x) for x in line.split("\t")[1:]] for line in lines])


def dump_pose(scene, t: int) -> Pose:
    """Pose after ``t`` oracle steps from the scene start."""
    pose = Pose.at(scene.start)
    for _ in range(t):
        pose = step(pose, oracle_increment(scene, pose.position))
    return pose


def run_dump(cfg: RunConfig, checkpoint, out_dir, eta=None, alpha=None) -> Dict[str, np.ndarray]:
    """Write the five response maps for one scene/pose; ``eta``/``alpha`` force fixed values."""
    agent = load_agent(checkpoint, cfg.fusion, eta, alpha)
    if agent.variant in ("two_d_only", "three_d_only", "concat"):
        agent.variant = "full"
    scene = generate_scene(cfg.dump.scene_seed, cfg.dump.difficulty)
    pose = dump_pose(scene, cfg.dump.step)
    f2d, f3d = agent.tokens(scene, pose, cfg.dump.step)
    _, trace = fuse_variant(agent.variant, f2d, f3d, agent.fusion)
    maps = response_maps(trace)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, grid in maps.items():
        (out / f"{name}.tsv").write_text(format_map(grid))
    return maps
