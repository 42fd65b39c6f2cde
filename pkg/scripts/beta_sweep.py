#!/usr/bin/env python3
"""PPO against one trained proxy across a grid of KL coefficients.

Reuses the world and reward models of a finished run-experiment directory and writes
beta_sweep/curve-beta{b}-{method}-seed{s}.csv plus a summary table.

    python scripts/beta_sweep.py --out-dir runs/default --betas 0.0,0.02,0.2 --updates 500
"""
import argparse
from dataclasses import replace
from pathlib import Path

from overopt.evaluation import overopt_stats, write_curve
from overopt.harness import ExperimentConfig, parse_config
from overopt.harness.experiment import StageCache, build_world, objective_for
from overopt.models import load_model
from overopt.policy_opt import run_ppo


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out-dir")
    ap.add_argument("--method", default="single")
    ap.add_argument("--betas", default="0.02,0.2")
    ap.add_argument("--updates", type=int, default=500)
    args = ap.parse_args()
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.out_dir:
        cfg = replace(cfg, output_dir=args.out_dir)
    root = Path(cfg.output_dir)
    world = build_world(cfg, StageCache(root))
    out = root / "beta_sweep"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["beta,seed,final_kl,final_gold,decline"]
    for beta in (float(b) for b in args.betas.split(",")):
        for seed in cfg.seeds:
            rm = load_model(root / f"runs/{args.method}-seed{seed}/rm.json")
            ppo = replace(cfg.ppo, kl_coefficient=beta, total_policy_updates=args.updates, seed=seed)
            _, curve = run_ppo(world.reference.copy(), world.reference, rm, objective_for(args.method), world.gold,
                               world.natural_probs, ppo, method=args.method)
            write_curve(curve, out / f"curve-beta{beta}-{args.method}-seed{seed}.csv")
            st = overopt_stats(curve)
            lines.append(f"{beta!r},{seed},{curve[-1].kl!r},{st.final_gold!r},{st.decline!r}")
            print(lines[-1], flush=True)
    (out / f"summary-{args.method}.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
