"""Run the fixed (eta, alpha) grid and print the best cell and the eta=0 response check.

Usage: python scripts/run_sweep.py [--config CFG] [--out DIR] [--jobs N]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from g2ra.config import load_config
from g2ra.experiments import parse_map, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config, out=args.out, jobs=args.jobs)
    rows = run_sweep(cfg, progress=lambda i, n, d: print(f"[{i}/{n}] {d}", file=sys.stderr, flush=True))
    out = Path(cfg.out)
    print((out / "sweep.txt").read_text(), end="")
    best = next(r for r in rows if r["best"])
    print(f"best cell: eta={best['eta']:g} alpha={best['alpha']:g}")
    if 0.0 in cfg.sweep.eta:
        worst = max(float(np.abs(parse_map((out / "cells" / f"eta0_alpha{a:g}" / "responses" /
                                             "delta_gpi.tsv").read_text())).max())
                    for a in cfg.sweep.alpha)
        print(f"eta=0 delta_gpi max |value|: {worst}")
    print(f"plot data: {out / 'sweep_grid.tsv'}")


if __name__ == "__main__":
    main()
