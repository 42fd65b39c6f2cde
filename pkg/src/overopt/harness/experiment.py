"""Experiment orchestration with content-hash stage caching.

Layout under the output directory::

    world/       gold.json reference.json natural.json dataset.jsonl
    runs/<method>-seed<s>/   rm.json rm_metrics.csv curve.csv stats.csv calibration_<obj>.csv
    summary/     curves_<method>.csv overopt_stats.csv params.csv calibration.csv gold_vs_kl.svg proxy_vs_kl.svg
    ablation/    ensemble-ep<E>-seed<s>/...  epoch_ablation.csv
    stages/      one JSON record per completed stage (input key + output hashes)
    manifest.json

A stage is skipped when its record's input key matches and every output file still
has the recorded hash. Keys chain through the hashes of upstream outputs, so any
change upstream re-runs exactly the dependent stages.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import __version__
from ..evaluation import (CurvePoint, aggregate_runs, calibration_report, overopt_stats, read_curve,
                          smoothed_range, write_curve)
from ..models import (Encoder, FullEnsembleRewardModel, GoldRewardModel, MultiHeadRewardModel, PolicyModel,
                      RewardHead, load_model, save_model, train_reference_policy)
from ..policy_opt import run_ppo
from ..prefdata import build_dataset, load_dataset, save_dataset
from ..reward_training import MAX, MEAN, MIN, SINGLE, AggregationObjective, RmTrainConfig, train_reward_model
from .config import ExperimentConfig, RmConfig

log = logging.getLogger(__name__)

CALIBRATION_OBJECTIVES = {"min": MIN, "mean": MEAN, "max": MAX}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def objective_for(method: str) -> AggregationObjective:
    return SINGLE(0) if method == "single" else MIN


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


# ------------------------------------------------------------------ stages


class StageCache:
    """Records of completed stages under ``root/stages``."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.executed: list[str] = []

    def _record_path(self, name: str) -> Path:
        return self.root / "stages" / (name.replace("/", "__") + ".json")

    def record(self, name: str) -> dict | None:
        p = self._record_path(name)
        if not p.exists():
            return None
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            return None

    def fresh(self, name: str, key: str) -> bool:
        rec = self.record(name)
        if rec is None or rec.get("key") != key:
            return False
        for rel, digest in rec["outputs"].items():
            p = self.root / rel
            if not p.exists() or file_hash(p) != digest:
                return False
        return True

    def outputs(self, name: str) -> dict[str, str]:
        rec = self.record(name)
        return dict(rec["outputs"]) if rec else {}

    def info(self, name: str) -> dict:
        rec = self.record(name)
        return dict(rec.get("info", {})) if rec else {}

    def commit(self, name: str, key: str, outputs: list[str], info: dict | None = None) -> None:
        rec = {"stage": name, "key": key, "outputs": {rel: file_hash(self.root / rel) for rel in outputs},
               "info": info or {}}
        p = self._record_path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")

    def run(self, name: str, key: str, fn, outputs: list[str]) -> dict[str, str]:
        """Execute ``fn() -> info`` unless the stage is fresh; return the output hashes."""
        if self.fresh(name, key):
            log.info("stage %s: up to date", name)
            return self.outputs(name)
        log.info("stage %s: running", name)
        try:
            info = fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc
        self.commit(name, key, outputs, info)
        self.executed.append(name)
        return self.outputs(name)


# ------------------------------------------------------------------ world


@dataclass
class World:
    gold: GoldRewardModel
    reference: PolicyModel
    natural_probs: np.ndarray
    hashes: dict[str, str]


def build_world(cfg: ExperimentConfig, cache: StageCache) -> World:
    root = cache.root
    (root / "world").mkdir(parents=True, exist_ok=True)
    w, m = cfg.world, cfg.model

    def make_models():
        from ..prefdata import natural_distribution
        gold = GoldRewardModel.random(w.vocab_size, m.embed_dim, m.gold_hidden_dim, m.feature_dim,
                                      seed=w.seed, gain=m.gold_init_gain)
        nat = natural_distribution(w.vocab_size, w.seed)
        ref0 = PolicyModel.random(w.vocab_size, m.embed_dim, m.hidden_dim, w.prompt_len, w.completion_len,
                                  seed=w.seed)
        ref = train_reference_policy(ref0, nat, seed=w.seed, steps=cfg.reference.steps,
                                     batch_size=cfg.reference.batch_size,
                                     learning_rate=cfg.reference.learning_rate)
        save_model(gold, root / "world/gold.json")
        save_model(ref, root / "world/reference.json")
        (root / "world/natural.json").write_text(json.dumps([float(x) for x in nat]) + "\n")
        return {}

    model_key = _key("world", asdict(w), asdict(m), asdict(cfg.reference), __version__)
    h = cache.run("world", model_key, make_models,
                  ["world/gold.json", "world/reference.json", "world/natural.json"])

    gold = load_model(root / "world/gold.json")
    reference = load_model(root / "world/reference.json")
    nat = np.array(json.loads((root / "world/natural.json").read_text()))

    def make_data():
        ds = build_dataset(gold, reference, nat, seed=w.seed, n_train=cfg.data.n_train,
                           n_validation=cfg.data.n_validation, noise_rate=cfg.data.noise_rate,
                           mode=cfg.data.label_mode)
        save_dataset(ds, root / "world/dataset.jsonl")
        return {}

    data_key = _key("dataset", asdict(cfg.data), h)
    hd = cache.run("dataset", data_key, make_data, ["world/dataset.jsonl"])
    return World(gold, reference, nat, {**h, **hd})


# ------------------------------------------------------------------ one run


@dataclass
class RunSpec:
    """One method x seed run, self-contained so it can execute in a worker process."""

    root: str
    subdir: str
    method: str
    seed: int
    rm: dict
    cfg: dict
    world_hashes: dict
    stage_prefix: str = ""
    calibrate: bool = True


def build_reward_model(cfg: ExperimentConfig, method: str, seed: int, reference: PolicyModel):
    m, k = cfg.model, cfg.k

    def encoder(s: int) -> Encoder:
        if m.encoder_init == "policy":
            return Encoder.from_policy(reference, m.feature_dim, s)
        return Encoder.random(cfg.world.vocab_size, m.embed_dim, m.hidden_dim, m.feature_dim, s)

    if method == "single":
        return MultiHeadRewardModel.create(encoder(seed), 1, seed)
    if method == "multihead":
        return MultiHeadRewardModel.create(encoder(seed), k, seed)
    if method == "ensemble":
        return FullEnsembleRewardModel([(encoder(seed + i), RewardHead.random(m.feature_dim, seed + i))
                                        for i in range(k)])
    raise ValueError(f"unknown method {method!r}")


def _config_from_dict(d: dict) -> ExperimentConfig:
    from .config import _build
    return _build(ExperimentConfig, d, [], "")


def execute_run(spec: RunSpec) -> dict:
    """Train the reward model, run PPO and write calibration reports for one run.

    Returns {"executed": [...stage names...], "info": {...}}.
    """
    cfg = _config_from_dict(spec.cfg)
    cache = StageCache(Path(spec.root))
    root = cache.root
    rundir = root / spec.subdir
    rundir.mkdir(parents=True, exist_ok=True)
    rel = spec.subdir
    tag = spec.stage_prefix + f"{spec.method}-seed{spec.seed}"
    rm_cfg = RmConfig(**spec.rm)
    reference = load_model(root / "world/reference.json")

    def train_rm():
        dataset = load_dataset(root / "world/dataset.jsonl")
        model0 = build_reward_model(cfg, spec.method, spec.seed, reference)
        t0 = time.perf_counter()
        model, train_log = train_reward_model(dataset, model0, RmTrainConfig(
            learning_rate=rm_cfg.learning_rate, epochs=rm_cfg.epochs, batch_size=rm_cfg.batch_size,
            seed=spec.seed, per_head_bootstrap=rm_cfg.per_head_bootstrap))
        elapsed = time.perf_counter() - t0
        save_model(model, rundir / "rm.json")
        (rundir / "rm_metrics.csv").write_text(train_log.to_table())
        return {"rm_wall_clock_s": elapsed, "n_params": model.n_params()}

    rm_key = _key("rm", spec.method, spec.seed, asdict(rm_cfg), cfg.k, asdict(cfg.model), spec.world_hashes)
    rm_h = cache.run(f"rm/{tag}", rm_key, train_rm, [f"{rel}/rm.json", f"{rel}/rm_metrics.csv"])

    objective = objective_for(spec.method)

    def ppo():
        rm = load_model(rundir / "rm.json")
        gold = load_model(root / "world/gold.json")
        nat = np.array(json.loads((root / "world/natural.json").read_text()))
        points: list[CurvePoint] = []
        try:
            run_ppo(reference.copy(), reference, rm, objective, gold, nat, replace(cfg.ppo, seed=spec.seed),
                    method=spec.method, curve_sink=points.append)
        finally:
            # points emitted before a failure are kept
            write_curve(points, rundir / "curve.csv")
        st = overopt_stats(points)
        (rundir / "stats.csv").write_text(stats_table([(spec.method, spec.seed, st, points)]))
        return {}

    ppo_key = _key("ppo", asdict(cfg.ppo), spec.seed, str(objective), rm_h, spec.world_hashes)
    cache.run(f"ppo/{tag}", ppo_key, ppo, [f"{rel}/curve.csv", f"{rel}/stats.csv"])

    if spec.calibrate:
        def calib():
            rm = load_model(rundir / "rm.json")
            dataset = load_dataset(root / "world/dataset.jsonl")
            val = dataset.split("validation")
            for name, obj in _calibration_objectives(spec.method).items():
                rep = calibration_report(rm, obj, val, cfg.calibration_bins)
                (rundir / f"calibration_{name}.csv").write_text(rep.to_table())
            return {}

        names = list(_calibration_objectives(spec.method))
        calib_key = _key("calib", cfg.calibration_bins, rm_h, spec.world_hashes)
        cache.run(f"calib/{tag}", calib_key, calib, [f"{rel}/calibration_{n}.csv" for n in names])
    return {"executed": cache.executed, "info": cache.info(f"rm/{tag}")}


def _calibration_objectives(method: str) -> dict[str, AggregationObjective]:
    return {"single": SINGLE(0)} if method == "single" else CALIBRATION_OBJECTIVES


def _execute_all(specs: list[RunSpec], workers: int) -> list[dict]:
    if workers <= 1 or len(specs) <= 1:
        return [execute_run(s) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute_run, specs))


# ------------------------------------------------------------------ tables


def stats_table(rows) -> str:
    out = ["method,seed,peak_gold,peak_step,final_gold,decline,kl_at_peak,smoothed_range,final_kl"]
    for method, seed, st, curve in rows:
        out.append(f"{method},{seed},{st.peak_gold!r},{st.peak_step},{st.final_gold!r},{st.decline!r},"
                   f"{st.kl_at_peak!r},{smoothed_range(curve)!r},{curve[-1].kl!r}")
    return "\n".join(out) + "\n"


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    artifacts: dict[str, str] = field(default_factory=dict)
    runs: list[dict] = field(default_factory=list)
    executed_stages: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def verify(self, root) -> list[str]:
        """Artifacts that are missing or whose content no longer matches."""
        root = Path(root)
        return [rel for rel, h in self.artifacts.items() if not (root / rel).exists() or file_hash(root / rel) != h]


MANIFESTS = ("manifest.json", "ablation_manifest.json")


def _write_manifest(cfg: ExperimentConfig, root: Path, runs: list[dict], executed: list[str],
                    name: str = "manifest.json") -> RunManifest:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name not in MANIFESTS)
    artifacts = {str(p.relative_to(root)): file_hash(p) for p in files}
    man = RunManifest(cfg.fingerprint(), __version__, artifacts, runs, executed)
    (root / name).write_text(man.to_json())
    return man


def _specs(cfg: ExperimentConfig, world: World, methods, seeds, subdir_fmt, rm_for, prefix="",
           calibrate=True) -> list[RunSpec]:
    cfg_dict = asdict(cfg)
    return [RunSpec(str(Path(cfg.output_dir)), subdir_fmt(m, s), m, s, asdict(rm_for(m)), cfg_dict,
                    world.hashes, prefix, calibrate)
            for m in methods for s in seeds]


def run_full_experiment(cfg: ExperimentConfig) -> RunManifest:
    """World -> dataset -> per method x seed (RM, PPO, calibration) -> summary tables and plots."""
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    cache = StageCache(root)
    world = build_world(cfg, cache)
    specs = _specs(cfg, world, cfg.methods, cfg.seeds, lambda m, s: f"runs/{m}-seed{s}", cfg.rm_for)
    results = _execute_all(specs, cfg.workers)
    executed = list(cache.executed)
    runs = []
    for spec, res in zip(specs, results):
        executed.extend(res["executed"])
        runs.append({"method": spec.method, "seed": spec.seed, "dir": spec.subdir, **res["info"]})

    curves = {m: [read_curve(root / f"runs/{m}-seed{s}/curve.csv") for s in cfg.seeds] for m in cfg.methods}
    curve_hashes = {s.subdir: file_hash(root / s.subdir / "curve.csv") for s in specs}

    def summarize():
        emit_summary(cfg, root, curves, runs)
        return {}

    summary_outputs = [f"summary/curves_{m}.csv" for m in cfg.methods] + [
        "summary/overopt_stats.csv", "summary/params.csv", "summary/calibration.csv",
        "summary/gold_vs_kl.svg", "summary/proxy_vs_kl.svg"]
    calib_hashes = {s.subdir: cache.outputs(f"calib/{s.method}-seed{s.seed}") for s in specs}
    params = sorted((r["method"], r["seed"], r["n_params"]) for r in runs)
    cache.run("summary", _key("summary", curve_hashes, calib_hashes, params, __version__), summarize,
              summary_outputs)
    executed.extend(n for n in cache.executed if n not in executed)
    return _write_manifest(cfg, root, runs, executed)


def emit_summary(cfg: ExperimentConfig, root: Path, curves: dict[str, list[list[CurvePoint]]],
                 runs: list[dict]) -> None:
    from .plots import emit_plots

    out = root / "summary"
    out.mkdir(parents=True, exist_ok=True)
    agg = aggregate_runs(curves)
    for m, a in agg.items():
        (out / f"curves_{m}.csv").write_text(a.to_csv())
    rows = [(m, s, overopt_stats(c), c) for m in cfg.methods for s, c in zip(cfg.seeds, curves[m])]
    (out / "overopt_stats.csv").write_text(stats_table(rows))
    # parameter counts only: wall-clock is machine-dependent and lives in the manifest
    lines = ["method,seed,n_params"] + [f"{r['method']},{r['seed']},{r['n_params']}"
                                        for r in sorted(runs, key=lambda r: (r["method"], r["seed"]))]
    (out / "params.csv").write_text("\n".join(lines) + "\n")
    lines = ["method,seed,objective,ece,mean_confidence,accuracy"]
    for m in cfg.methods:
        for s in cfg.seeds:
            for name in _calibration_objectives(m):
                lines.append(_calibration_summary_row(root / f"runs/{m}-seed{s}/calibration_{name}.csv", m, s, name))
    (out / "calibration.csv").write_text("\n".join(lines) + "\n")
    emit_plots({m: out / f"curves_{m}.csv" for m in cfg.methods}, out)


def _calibration_summary_row(path: Path, method: str, seed: int, name: str) -> str:
    text = path.read_text().splitlines()
    footer = dict(kv.split("=", 1) for kv in text[-1].lstrip("# ").split())
    counts, conf, acc = [], [], []
    for row in text[1:-1]:
        _, _, c, a, n = row.split(",")
        if int(n):
            counts.append(int(n))
            conf.append(float(c))
            acc.append(float(a))
    w = np.array(counts, dtype=np.float64) / sum(counts)
    return f"{method},{seed},{name},{footer['ece']},{float(w @ conf)!r},{float(w @ acc)!r}"


# ------------------------------------------------------------------ ablation


def run_epoch_ablation(cfg: ExperimentConfig, epoch_grid: list[int] | None = None) -> RunManifest:
    """Full-ensemble RMs trained for each epoch count in the grid, PPO on each, one stats table."""
    grid = list(cfg.ablation_epochs if epoch_grid is None else epoch_grid)
    if not grid:
        raise ValueError("epoch grid must be non-empty")
    if min(grid) < 1:
        raise ValueError("epoch counts must be >= 1")
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    cache = StageCache(root)
    world = build_world(cfg, cache)
    specs: list[RunSpec] = []
    for e in dict.fromkeys(grid):  # duplicates in the grid share one run
        rm = replace(cfg.rm.ensemble, epochs=e)
        specs += _specs(cfg, world, ["ensemble"], cfg.seeds, lambda m, s, e=e: f"ablation/ensemble-ep{e}-seed{s}",
                        lambda m, rm=rm: rm, prefix=f"ablation-ep{e}/", calibrate=False)
    results = _execute_all(specs, cfg.workers)
    executed = list(cache.executed)
    runs = []
    for spec, res in zip(specs, results):
        executed.extend(res["executed"])
        runs.append({"method": spec.method, "seed": spec.seed, "dir": spec.subdir,
                     "epochs": spec.rm["epochs"], **res["info"]})
    lines = ["epochs,seed,peak_gold,peak_step,final_gold,decline,kl_at_peak,smoothed_range,final_kl"]
    for e in grid:
        for s in cfg.seeds:
            c = read_curve(root / f"ablation/ensemble-ep{e}-seed{s}/curve.csv")
            st = overopt_stats(c)
            lines.append(f"{e},{s},{st.peak_gold!r},{st.peak_step},{st.final_gold!r},{st.decline!r},"
                         f"{st.kl_at_peak!r},{smoothed_range(c)!r},{c[-1].kl!r}")
    (root / "ablation").mkdir(exist_ok=True)
    (root / "ablation/epoch_ablation.csv").write_text("\n".join(lines) + "\n")
    return _write_manifest(cfg, root, runs, executed, "ablation_manifest.json")


def read_table(path) -> list[dict]:
    """Rows of one of the CSV tables written here (numeric fields stay strings)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]
