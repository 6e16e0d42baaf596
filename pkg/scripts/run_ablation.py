"""Train and evaluate every variant for every seed, then check the expected ordering.

Usage: python scripts/run_ablation.py [--config CFG] [--out DIR] [--jobs N]
"""

import argparse
import sys
import time
from pathlib import Path

from g2ra.config import load_config
from g2ra.experiments import run_ablate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config, out=args.out, jobs=args.jobs)
    t0 = time.perf_counter()
    summary = run_ablate(cfg, progress=lambda i, n, d: print(f"[{i}/{n}] {d}", file=sys.stderr, flush=True))
    minutes = (time.perf_counter() - t0) / 60
    print((Path(cfg.out) / "ablation.txt").read_text(), end="")
    full = {r["variant"]: r for r in summary if r["split"] == "full"}
    if "full" in full:
        f = full["full"]
        for other in ("concat", "two_d_only"):
            if other in full:
                o = full[other]
                print(f"full vs {other}: SR {f['sr']:.2f} > {o['sr']:.2f} {f['sr'] > o['sr']}, "
                      f"NE {f['ne']:.2f} < {o['ne']:.2f} {f['ne'] < o['ne']}")
        if "no_geo_inject" in full:
            print(f"full vs no_geo_inject: SR {f['sr']:.2f} >= {full['no_geo_inject']['sr']:.2f} "
                  f"{f['sr'] >= full['no_geo_inject']['sr']}")
    print(f"runtime {minutes:.1f} min")


if __name__ == "__main__":
    main()
