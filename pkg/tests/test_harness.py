import json
import shutil
from dataclasses import replace
from pathlib import Path

import pytest

from overopt import evaluation as ev
from overopt.harness import cli
from overopt.harness import experiment as ex
from overopt.harness.config import ConfigError, ExperimentConfig, config_to_toml, loads_config, parse_config
from overopt.harness.plots import emit_plots
from overopt.reward_training import TrainingError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def smoke(tmp, **kw) -> ExperimentConfig:
    return replace(parse_config(CONFIGS / "smoke.toml"), output_dir=str(tmp), **kw)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = smoke(root)
    return cfg, ex.run_full_experiment(cfg)


def _snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


# ------------------------------------------------------------------ config


def test_empty_config_is_all_defaults():
    assert loads_config("") == ExperimentConfig()


def test_example_config_spells_out_the_defaults():
    assert parse_config(CONFIGS / "default.toml") == ExperimentConfig()


def test_invalid_value_names_key_and_line():
    text = "k = 3\n\n[ppo]\nclip_epsilon = 0.2\nkl_coefficient = -1\n"
    with pytest.raises(ConfigError, match=r"ppo\.kl_coefficient \(line 5\)"):
        loads_config(text)


def test_unknown_key_and_wrong_type():
    with pytest.raises(ConfigError, match=r"unknown key model\.width \(line 2\)"):
        loads_config("[model]\nwidth = 3\n")
    with pytest.raises(ConfigError, match="data.n_train"):
        loads_config('[data]\nn_train = "many"\n')
    with pytest.raises(ConfigError, match="parse error"):
        loads_config("k = = 3")
    with pytest.raises(ConfigError, match="methods"):
        loads_config('methods = ["single", "bogus"]')


def test_config_toml_round_trip():
    cfg = loads_config('seeds = [4, 5]\n[ppo]\nkl_coefficient = 0.5\n[rm.ensemble]\nepochs = 7\n')
    assert loads_config(config_to_toml(cfg)) == cfg
    assert loads_config(config_to_toml(ExperimentConfig())) == ExperimentConfig()


def test_fingerprint_ignores_output_location():
    a = ExperimentConfig()
    assert a.fingerprint() == replace(a, output_dir="elsewhere", workers=4).fingerprint()
    assert a.fingerprint() != replace(a, k=4).fingerprint()


# -------------------------------------------------------------- experiment


def test_outputs_and_manifest(smoke_run):
    cfg, man = smoke_run
    root = Path(cfg.output_dir)
    for name in ("curves_single.csv", "curves_multihead.csv", "curves_ensemble.csv", "overopt_stats.csv",
                 "params.csv", "calibration.csv", "gold_vs_kl.svg", "proxy_vs_kl.svg"):
        assert (root / "summary" / name).exists()
    assert man.verify(root) == []
    on_disk = {str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()} - set(ex.MANIFESTS)
    assert set(man.artifacts) == on_disk
    assert man.config_hash == cfg.fingerprint()
    stats = ex.read_table(root / "summary/overopt_stats.csv")
    assert [(r["method"], r["seed"]) for r in stats] == [(m, str(s)) for m in cfg.methods for s in cfg.seeds]
    assert all(float(r["decline"]) >= 0 for r in stats)


def test_parameter_identities_in_manifest(smoke_run):
    cfg, man = smoke_run
    n = {(r["method"], r["seed"]): r["n_params"] for r in man.runs}
    d = cfg.model.feature_dim
    for s in cfg.seeds:
        assert n["multihead", s] - n["single", s] == (cfg.k - 1) * (d + 1)
        assert n["ensemble", s] == cfg.k * n["single", s]
    assert all(r["rm_wall_clock_s"] > 0 for r in man.runs)
    assert "wall" not in (Path(cfg.output_dir) / "summary/params.csv").read_text()


def test_calibration_reports_per_objective(smoke_run):
    cfg, _ = smoke_run
    rows = ex.read_table(Path(cfg.output_dir) / "summary/calibration.csv")
    objectives = {(r["method"], r["objective"]) for r in rows}
    assert ("multihead", "min") in objectives and ("multihead", "mean") in objectives
    assert ("single", "single") in objectives
    assert all(0 <= float(r["ece"]) <= 1 for r in rows)


def test_rerun_is_idempotent(smoke_run, tmp_path):
    cfg, _ = smoke_run
    root = tmp_path / "copy"
    shutil.copytree(cfg.output_dir, root)
    before = _snapshot(root)
    man = ex.run_full_experiment(replace(cfg, output_dir=str(root)))
    assert man.executed_stages == []
    assert _snapshot(root) == before


def test_deleting_one_curve_reruns_only_that_ppo(smoke_run, tmp_path):
    cfg, _ = smoke_run
    root = tmp_path / "copy"
    shutil.copytree(cfg.output_dir, root)
    before = _snapshot(root)
    (root / "runs/multihead-seed2/curve.csv").unlink()
    man = ex.run_full_experiment(replace(cfg, output_dir=str(root)))
    assert man.executed_stages == ["ppo/multihead-seed2"]
    assert _snapshot(root) == before


def test_ppo_change_keeps_world_and_reward_models(smoke_run, tmp_path):
    cfg, _ = smoke_run
    root = tmp_path / "copy"
    shutil.copytree(cfg.output_dir, root)
    cfg2 = replace(cfg, output_dir=str(root), ppo=replace(cfg.ppo, total_policy_updates=20))
    man = ex.run_full_experiment(cfg2)
    assert not [s for s in man.executed_stages if s.startswith(("world", "dataset", "rm/"))]
    assert len([s for s in man.executed_stages if s.startswith("ppo/")]) == 6
    assert ev.read_curve(root / "runs/single-seed1/curve.csv")[-1].step == 20


def test_tampered_artifact_is_reported(smoke_run, tmp_path):
    cfg, man = smoke_run
    root = tmp_path / "copy"
    shutil.copytree(cfg.output_dir, root)
    path = root / "runs/single-seed1/stats.csv"
    path.write_text(path.read_text() + "\n")
    assert ex.RunManifest.load(root / "manifest.json").verify(root) == ["runs/single-seed1/stats.csv"]


def test_parallel_workers_match_serial(smoke_run, tmp_path):
    cfg, _ = smoke_run
    ex.run_full_experiment(replace(cfg, output_dir=str(tmp_path), workers=2))
    serial = Path(cfg.output_dir)
    for rel in ("runs/single-seed1/curve.csv", "runs/ensemble-seed2/curve.csv", "summary/overopt_stats.csv"):
        assert (tmp_path / rel).read_bytes() == (serial / rel).read_bytes()


def test_epoch_ablation_table(smoke_run, tmp_path):
    cfg, _ = smoke_run
    root = tmp_path / "copy"
    shutil.copytree(cfg.output_dir, root)
    man = ex.run_epoch_ablation(replace(cfg, output_dir=str(root)), [2, 1, 2])
    rows = ex.read_table(root / "ablation/epoch_ablation.csv")
    assert [(r["epochs"], r["seed"]) for r in rows] == [("2", "1"), ("2", "2"), ("1", "1"), ("1", "2"),
                                                       ("2", "1"), ("2", "2")]
    assert rows[0] == rows[4]
    assert (root / "ablation_manifest.json").exists() and man.verify(root) == []
    assert json.loads((root / "manifest.json").read_text())["executed_stages"]  # main manifest untouched
    with pytest.raises(ValueError):
        ex.run_epoch_ablation(replace(cfg, output_dir=str(root)), [])


def test_stage_failure_names_the_stage(smoke_run, tmp_path, monkeypatch):
    cfg, _ = smoke_run

    def boom(*a, **k):
        raise TrainingError("diverged at epoch 0, batch 3: overflow")

    monkeypatch.setattr(ex, "train_reward_model", boom)
    with pytest.raises(ex.StageError, match="rm/single-seed1"):
        ex.run_full_experiment(replace(cfg, output_dir=str(tmp_path), methods=["single"], seeds=[1]))


# ------------------------------------------------------------------- plots


def test_plots_are_byte_deterministic(smoke_run, tmp_path):
    cfg, _ = smoke_run
    summary = Path(cfg.output_dir) / "summary"
    tables = {m: summary / f"curves_{m}.csv" for m in cfg.methods}
    a = emit_plots(tables, tmp_path / "a")
    b = emit_plots(tables, tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert a[0].read_bytes() == (summary / "gold_vs_kl.svg").read_bytes()
    with pytest.raises(ValueError):
        emit_plots({}, tmp_path / "c")


def test_identical_runs_plot_zero_band(tmp_path):
    pts = [ev.CurvePoint(20 * i, 0.1 * i, 0.0, 1.0, 0.5, 1) for i in range(5)]
    agg = ev.aggregate_runs({"flat": [pts, pts]}, n_points=5)["flat"]
    assert not agg.gold_std.any() and not agg.proxy_std.any()
    path = tmp_path / "curves_flat.csv"
    path.write_text(agg.to_csv())
    emit_plots({"flat": path}, tmp_path)
    assert (tmp_path / "gold_vs_kl.svg").stat().st_size > 0


# --------------------------------------------------------------------- CLI


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[ppo]\nkl_coefficient = -1\n")
    assert cli.main(["run-experiment", "--config", str(bad)]) == 1
    assert "ppo.kl_coefficient" in capsys.readouterr().err
    assert cli.main(["run-experiment", "--config", str(tmp_path / "missing.toml")]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["--help"]) == 0
    assert cli.main(["eval", str(tmp_path / "nope.csv")]) == 1


def test_cli_runtime_failure_exits_2(tmp_path, monkeypatch, capsys):
    def boom(cfg):
        raise ex.StageError("ppo/single-seed1", TrainingError("diverged"))

    monkeypatch.setattr(cli, "run_full_experiment", boom)
    assert cli.main(["run-experiment", "--out-dir", str(tmp_path)]) == 2
    assert "ppo/single-seed1" in capsys.readouterr().err


def test_cli_stepwise_pipeline(tmp_path, capsys):
    conf = ["--config", str(CONFIGS / "smoke.toml"), "--out-dir", str(tmp_path)]
    data = tmp_path / "d.jsonl"
    assert cli.main(["gen-data", *conf, "--count", "120", "--output", str(data)]) == 0
    rm = tmp_path / "rm.json"
    assert cli.main(["train-rm", *conf, "--method", "multihead", "--k", "4", "--lr", "0.01", "--dataset", str(data),
                     "--output", str(rm)]) == 0
    assert "head3_acc_noisy" in capsys.readouterr().out
    curve = tmp_path / "curve.csv"
    assert cli.main(["ppo", *conf, "--rm", str(rm), "--updates", "20", "--kl-coefficient", "0.1",
                     "--output", str(curve)]) == 0
    assert [p.step for p in ev.read_curve(curve)] == [0, 10, 20]
    capsys.readouterr()
    assert cli.main(["eval", *conf, str(curve)]) == 0
    assert capsys.readouterr().out.startswith("curve,peak_gold")
    assert cli.main(["calib", *conf, "--rm", str(rm), "--dataset", str(data), "--bins", "4"]) == 0
    out = capsys.readouterr().out
    assert "objective=min" in out and "objective=mean" in out and "objective=max" in out
    assert cli.main(["ppo", *conf, "--rm", str(rm), "--objective", "median"]) == 1
