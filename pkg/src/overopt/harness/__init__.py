"""Configuration, orchestration, plotting and the command-line interface."""
from .config import ConfigError, ExperimentConfig, loads_config, parse_config
from .experiment import RunManifest, StageError, run_epoch_ablation, run_full_experiment

__all__ = ["ConfigError", "ExperimentConfig", "RunManifest", "StageError", "loads_config", "parse_config",
           "run_epoch_ablation", "run_full_experiment"]
