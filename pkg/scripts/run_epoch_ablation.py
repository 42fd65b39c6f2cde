#!/usr/bin/env python3
"""Full-ensemble epoch ablation: does training each member longer reduce over-optimization?

    python scripts/run_epoch_ablation.py --epochs 1,2,3 --out-dir runs/default
"""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from overopt.harness import ExperimentConfig, parse_config, run_epoch_ablation
from overopt.harness.experiment import read_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out-dir")
    ap.add_argument("--epochs", default=None, help="comma-separated grid (default from config)")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, workers=args.workers, **({"output_dir": args.out_dir} if args.out_dir else {}))
    grid = [int(e) for e in args.epochs.split(",")] if args.epochs else None
    run_epoch_ablation(cfg, grid)
    rows = read_table(Path(cfg.output_dir) / "ablation/epoch_ablation.csv")
    for e in dict.fromkeys(int(r["epochs"]) for r in rows):
        d = np.array([float(r["decline"]) for r in rows if int(r["epochs"]) == e])
        f = np.array([float(r["final_gold"]) for r in rows if int(r["epochs"]) == e])
        print(f"epochs={e}: mean decline {d.mean():.4f}, mean final gold {f.mean():.4f}  (seeds: {d.round(4)})")


if __name__ == "__main__":
    main()
