"""Command-line entry point: ``g2ra <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import experiments as X
from .config import ConfigError, dump_config, load_config
from .episode import EpisodeFormatError


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("--variant", type=str)
    p.add_argument("--eta", type=float, help="pin the injection strength to this value")
    p.add_argument("--alpha", type=float, help="pin the fusion gate to this value")
    p.add_argument("--jobs", type=int, help="worker processes for ablate/sweep")
    p.add_argument("--episodes", type=int, help="override eval.episodes_per_split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="g2ra", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gradcheck", "finite-difference check of every fusion and policy parameter"),
        ("train", "train one variant, write checkpoint.json and train_log.jsonl"),
        ("eval", "roll out a checkpoint (or the scripted oracle) and write a metrics report"),
        ("ablate", "train and evaluate every variant for every seed"),
        ("sweep", "grid over fixed injection strength and gate"),
        ("dump-responses", "write per-token response maps for one checkpoint"),
        ("metrics", "recompute a metrics report from a saved episode file"),
    ]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name in ("eval", "dump-responses"):
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint.json, or 'oracle' (eval only) for the scripted policy")
        if name == "metrics":
            p.add_argument("--episodes-file", type=Path, required=True)
    return parser


def _load(args):
    overrides = {"seed": args.seed, "out": args.out, "variant": args.variant, "jobs": args.jobs}
    if args.command not in ("dump-responses",):
        # dump-responses takes --eta/--alpha as forced values, not training settings
        overrides.update(eta=args.eta, alpha=args.alpha)
    cfg = load_config(args.config, **overrides)
    if args.episodes is not None:
        cfg.eval.episodes_per_split = args.episodes
    return cfg.validate()


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    out = Path(cfg.out)
    t0 = time.perf_counter()
    try:
        if args.command == "gradcheck":
            rows = X.gradcheck(cfg.gradcheck, cfg.variant, cfg.seed)
            print(X.format_gradcheck(rows, cfg.gradcheck.tol), end="")
            worst = max(r[1] for r in rows)
            print(f"worst {worst:.3e} (tol {cfg.gradcheck.tol:g}), {time.perf_counter() - t0:.1f}s")
            return 0 if worst < cfg.gradcheck.tol else 1
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))
        if args.command == "train":
            X.run_train(cfg.train_config(), out, progress=lambda r: _log(json.dumps(r)))
        elif args.command == "eval":
            report = X.run_eval(cfg, args.checkpoint, out)
            print((out / "report.txt").read_text(), end="")
            bad = [k for k, v in report.dominance.items() if not v]
            if bad:
                _log(f"metric dominance violated: {bad}")
                return 1
        elif args.command == "metrics":
            X.recompute_report(args.episodes_file, out)
            print((out / "report.txt").read_text(), end="")
        elif args.command == "ablate":
            X.run_ablate(cfg, progress=lambda i, n, d: _log(f"[{i}/{n}] {d}"))
            print((out / "ablation.txt").read_text(), end="")
        elif args.command == "sweep":
            X.run_sweep(cfg, progress=lambda i, n, d: _log(f"[{i}/{n}] {d}"))
            print((out / "sweep.txt").read_text(), end="")
        elif args.command == "dump-responses":
            maps = X.run_dump(cfg, args.checkpoint, out, eta=args.eta, alpha=args.alpha)
            for name in maps:
                print(out / f"{name}.tsv")
    except (FileNotFoundError, ValueError, EpisodeFormatError) as exc:
        _log(f"error: {exc}")
        return 1
    _log(f"done in {time.perf_counter() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
