#!/usr/bin/env python3
"""Single-head vs multi-head vs full-ensemble comparison, then a short report.

    python scripts/run_comparison.py --config configs/default.toml --out-dir runs/default
"""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from overopt.harness import ExperimentConfig, parse_config, run_full_experiment
from overopt.harness.experiment import read_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out-dir")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, workers=args.workers, **({"output_dir": args.out_dir} if args.out_dir else {}))
    man = run_full_experiment(cfg)
    rows = read_table(Path(cfg.output_dir) / "summary/overopt_stats.csv")
    print(f"{len(man.executed_stages)} stages executed; results in {cfg.output_dir}/summary")
    print(f"{'method':10s} {'final gold':>18s} {'decline':>18s} {'decline/range':>14s}")
    for method in cfg.methods:
        sel = [r for r in rows if r["method"] == method]
        final = np.array([float(r["final_gold"]) for r in sel])
        decline = np.array([float(r["decline"]) for r in sel])
        ratio = decline / np.array([float(r["smoothed_range"]) for r in sel])
        print(f"{method:10s} {final.mean():9.4f} +- {final.std(ddof=1) if len(sel) > 1 else 0:.4f} "
              f"{decline.mean():9.4f} +- {decline.std(ddof=1) if len(sel) > 1 else 0:.4f} {ratio.mean():14.3f}")


if __name__ == "__main__":
    main()
