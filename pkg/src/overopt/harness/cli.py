"""Command-line entry point: ``overopt <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input or config, 2 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..evaluation import calibration_report, overopt_stats, read_curve, smoothed_range, write_curve
from ..models import FormatError, load_model, save_model
from ..policy_opt import run_ppo
from ..prefdata import DatasetParseError, DatasetVersionError, build_dataset, load_dataset, save_dataset
from ..reward_training import AggregationObjective, RmTrainConfig, TrainingError, train_reward_model
from .config import METHODS, ConfigError, ExperimentConfig, parse_config
from .experiment import (StageCache, StageError, build_reward_model, build_world, objective_for,
                         run_epoch_ablation, run_full_experiment)
from .plots import emit_plots

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.out_dir:
        cfg = replace(cfg, output_dir=args.out_dir)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    return cfg


def _world(cfg: ExperimentConfig):
    return build_world(cfg, StageCache(Path(cfg.output_dir)))


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    # the global --seed picks the world (gold model, reference policy, dataset)
    if args.seed is not None:
        cfg = replace(cfg, world=replace(cfg.world, seed=args.seed))
    data = cfg.data
    if args.count is not None:
        data = replace(data, n_train=args.count)
    if args.noise_rate is not None:
        data = replace(data, noise_rate=args.noise_rate)
    cfg = replace(cfg, data=data)
    world = _world(cfg)
    ds = build_dataset(world.gold, world.reference, world.natural_probs, seed=cfg.world.seed,
                       n_train=data.n_train, n_validation=data.n_validation, noise_rate=data.noise_rate,
                       mode=data.label_mode)
    out = Path(args.output or Path(cfg.output_dir) / "dataset.jsonl")
    save_dataset(ds, out)
    flipped = sum(p.flipped for p in ds.pairs)
    print(f"wrote {len(ds.pairs)} pairs to {out} (flipped {flipped})")
    return EXIT_OK


def cmd_train_rm(args, cfg: ExperimentConfig) -> int:
    if args.k is not None:
        cfg = replace(cfg, k=args.k)
    world = _world(cfg)
    seed = cfg.seeds[0]
    dataset = load_dataset(args.dataset or Path(cfg.output_dir) / "world/dataset.jsonl")
    rm_cfg = cfg.rm_for(args.method)
    epochs = args.epochs or rm_cfg.epochs
    model0 = build_reward_model(cfg, args.method, seed, world.reference)
    model, log = train_reward_model(dataset, model0, RmTrainConfig(
        learning_rate=args.lr or rm_cfg.learning_rate, epochs=epochs, batch_size=rm_cfg.batch_size, seed=seed,
        per_head_bootstrap=rm_cfg.per_head_bootstrap))
    out = Path(args.output or Path(cfg.output_dir) / f"rm-{args.method}-seed{seed}.json")
    save_model(model, out)
    print(log.to_table(), end="")
    print(f"wrote {out} ({model.n_params()} parameters)")
    return EXIT_OK


def cmd_ppo(args, cfg: ExperimentConfig) -> int:
    world = _world(cfg)
    seed = cfg.seeds[0]
    rm = load_model(args.rm)
    objective = AggregationObjective.parse(args.objective) if args.objective else objective_for(args.method)
    ppo = replace(cfg.ppo, seed=seed)
    if args.updates is not None:
        ppo = replace(ppo, total_policy_updates=args.updates)
    if args.kl_coefficient is not None:
        ppo = replace(ppo, kl_coefficient=args.kl_coefficient)
    points = []
    out = Path(args.output or Path(cfg.output_dir) / f"curve-{args.method}-seed{seed}.csv")
    try:
        run_ppo(world.reference.copy(), world.reference, rm, objective, world.gold, world.natural_probs, ppo,
                method=args.method, curve_sink=points.append)
    finally:
        write_curve(points, out)
    print(f"wrote {len(points)} curve points to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    print("curve,peak_gold,peak_step,final_gold,decline,kl_at_peak,smoothed_range")
    for path in args.curves:
        c = read_curve(path)
        st = overopt_stats(c)
        print(f"{path},{st.peak_gold:.6g},{st.peak_step},{st.final_gold:.6g},{st.decline:.6g},"
              f"{st.kl_at_peak:.6g},{smoothed_range(c):.6g}")
    return EXIT_OK


def cmd_calib(args, cfg: ExperimentConfig) -> int:
    rm = load_model(args.rm)
    dataset = load_dataset(args.dataset or Path(cfg.output_dir) / "world/dataset.jsonl")
    pairs = dataset.split(args.split)
    for name in args.objectives.split(","):
        rep = calibration_report(rm, AggregationObjective.parse(name), pairs, args.bins or cfg.calibration_bins,
                                 use_noisy_labels=args.noisy_labels)
        print(rep.to_table(), end="")
    return EXIT_OK


def cmd_run_experiment(args, cfg: ExperimentConfig) -> int:
    man = run_full_experiment(cfg)
    print(f"{len(man.executed_stages)} stages executed, {len(man.artifacts)} artifacts in {cfg.output_dir}")
    print((Path(cfg.output_dir) / "summary/overopt_stats.csv").read_text(), end="")
    return EXIT_OK


def cmd_ablate_epochs(args, cfg: ExperimentConfig) -> int:
    grid = [int(x) for x in args.epochs.split(",")] if args.epochs else None
    run_epoch_ablation(cfg, grid)
    print((Path(cfg.output_dir) / "ablation/epoch_ablation.csv").read_text(), end="")
    return EXIT_OK


def cmd_plot(args, cfg: ExperimentConfig) -> int:
    src = Path(args.summary or Path(cfg.output_dir) / "summary")
    tables = {p.stem[len("curves_"):]: p for p in sorted(src.glob("curves_*.csv"))}
    paths = emit_plots(tables, args.output or src)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="run seed (gen-data: world seed)")
    common.add_argument("--out-dir", help="output directory (overrides output_dir)")
    common.add_argument("--workers", type=int, help="concurrent method x seed runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="overopt", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="build the world and a labeled preference dataset")
    s.add_argument("--count", type=int, help="number of training pairs")
    s.add_argument("--noise-rate", type=float)
    s.add_argument("--output", help="dataset path (default <out-dir>/dataset.jsonl)")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train-rm", parents=[common], help="train one reward model")
    s.add_argument("--method", choices=METHODS, default="multihead")
    s.add_argument("--dataset")
    s.add_argument("--k", type=int, help="heads or ensemble members")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float, help="learning rate")
    s.add_argument("--output")
    s.set_defaults(fn=cmd_train_rm)

    s = sub.add_parser("ppo", parents=[common], help="run PPO against a trained reward model")
    s.add_argument("--rm", required=True, help="reward model JSON")
    s.add_argument("--method", choices=METHODS, default="multihead")
    s.add_argument("--objective", help="min, mean, max or single(i); default follows --method")
    s.add_argument("--updates", type=int, help="total policy updates")
    s.add_argument("--kl-coefficient", type=float, help="KL penalty weight")
    s.add_argument("--output")
    s.set_defaults(fn=cmd_ppo)

    s = sub.add_parser("eval", parents=[common], help="over-optimization statistics of curve tables")
    s.add_argument("curves", nargs="+")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("calib", parents=[common], help="reliability tables and ECE")
    s.add_argument("--rm", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", default="validation")
    s.add_argument("--objectives", default="min,mean,max")
    s.add_argument("--bins", type=int)
    s.add_argument("--noisy-labels", action="store_true", help="score against the noisy labels")
    s.set_defaults(fn=cmd_calib)

    s = sub.add_parser("run-experiment", parents=[common], help="full method x seed comparison")
    s.set_defaults(fn=cmd_run_experiment)

    s = sub.add_parser("ablate-epochs", parents=[common], help="full-ensemble epoch ablation")
    s.add_argument("--epochs", help="comma-separated epoch grid (default from config)")
    s.set_defaults(fn=cmd_ablate_epochs)

    s = sub.add_parser("plot", parents=[common], help="render SVG charts from summary tables")
    s.add_argument("--summary", help="directory holding curves_<method>.csv")
    s.add_argument("--output")
    s.set_defaults(fn=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return args.fn(args, cfg)
    except (ConfigError, ValueError, FormatError, DatasetParseError, DatasetVersionError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StageError, TrainingError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
