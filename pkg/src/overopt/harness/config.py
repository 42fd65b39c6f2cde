"""Experiment configuration: nested dataclasses loaded from a TOML file.

Every field has a default, so an empty file is a valid config. Unknown keys are
rejected. Errors name the dotted key path and, when it can be found, the line.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli

from ..policy_opt import PpoConfig

METHODS = ("single", "multihead", "ensemble")


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    vocab_size: int = 32
    prompt_len: int = 8
    completion_len: int = 16
    seed: int = 0  # gold model, natural distribution, reference policy and dataset

    def __post_init__(self):
        for name in ("vocab_size", "prompt_len", "completion_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class ModelConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    feature_dim: int = 64
    gold_hidden_dim: int = 256
    gold_init_gain: float = 6.0
    encoder_init: str = "policy"  # "policy" copies the reference policy's lower layers; "fresh" is random

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gold_hidden_dim <= self.hidden_dim:
            raise ValueError("gold_hidden_dim must be strictly larger than hidden_dim")
        if self.gold_init_gain <= 0:
            raise ValueError("gold_init_gain must be > 0")
        if self.encoder_init not in ("policy", "fresh"):
            raise ValueError("encoder_init must be 'policy' or 'fresh'")


@dataclass
class ReferenceConfig:
    steps: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-2

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps must be >= 0, batch_size >= 1, learning_rate > 0")


@dataclass
class DataConfig:
    n_train: int = 4000
    n_validation: int = 500
    noise_rate: float = 0.25
    label_mode: str = "flip"

    def __post_init__(self):
        if self.n_train < 1 or self.n_validation < 1:
            raise ValueError("n_train and n_validation must be >= 1")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must be in [0, 0.5)")
        if self.label_mode not in ("flip", "bradley_terry"):
            raise ValueError("label_mode must be 'flip' or 'bradley_terry'")


@dataclass
class RmConfig:
    learning_rate: float = 3e-3
    epochs: int = 1
    batch_size: int = 64
    per_head_bootstrap: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class RmSection:
    single: RmConfig = field(default_factory=RmConfig)
    multihead: RmConfig = field(default_factory=RmConfig)
    ensemble: RmConfig = field(default_factory=lambda: RmConfig(epochs=3))


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rm: RmSection = field(default_factory=RmSection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    k: int = 3
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    ablation_epochs: list[int] = field(default_factory=lambda: [1, 3])
    calibration_bins: int = 10
    output_dir: str = "runs/default"
    workers: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("seeds must be a non-empty list of distinct integers")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        if not self.ablation_epochs or min(self.ablation_epochs) < 1:
            raise ValueError("ablation_epochs must be a non-empty list of positive integers")
        if self.calibration_bins < 1:
            raise ValueError("calibration_bins must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def rm_for(self, method: str) -> RmConfig:
        return getattr(self.rm, method)

    def fingerprint(self) -> str:
        """Hash of everything that affects results (not output_dir or workers)."""
        d = asdict(self)
        d.pop("output_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------------- parsing


def _locate(text: str, path: list[str]) -> int | None:
    """1-based line where the dotted key ``path`` is assigned, if it can be found."""
    table: list[str] = []
    header = re.compile(r"^\s*\[([^\[\]]+)\]\s*(#.*)?$")
    assign = re.compile(r"^\s*([A-Za-z0-9_.\-\" ]+?)\s*=")
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            table = [p.strip().strip('"') for p in m.group(1).split(".")]
            continue
        m = assign.match(line)
        if m:
            key = table + [p.strip().strip('"') for p in m.group(1).split(".")]
            if key == path:
                return lineno
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m and [p.strip() for p in m.group(1).split(".")] == path:
            return lineno
    return None


def _where(text: str, path: list[str]) -> str:
    line = _locate(text, path)
    return f"{'.'.join(path)}" + (f" (line {line})" if line else "")


def _build(cls, values: dict, path: list[str], text: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{_where(text, path)}: expected a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown key {_where(text, path + [key])}")
    kwargs = {}
    for name, value in values.items():
        f = known[name]
        sub = _nested_type(cls, name)
        if sub is not None:
            kwargs[name] = _build(sub, value, path + [name], text)
        else:
            kwargs[name] = _coerce(value, f, path + [name], text)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        culprit = next((n for n in known if n in str(exc)), None)
        where = _where(text, path + [culprit]) if culprit else (".".join(path) or "<root>")
        raise ConfigError(f"{where}: {exc}") from None


def _nested_type(cls, name: str):
    default = next(f for f in dataclasses.fields(cls) if f.name == name)
    if default.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        sample = default.default_factory()  # type: ignore[misc]
        if dataclasses.is_dataclass(sample):
            return type(sample)
    return None


def _coerce(value, f: dataclasses.Field, path: list[str], text: str):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()  # type: ignore[misc]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{_where(text, path)}: expected {type(default).__name__}, got {value!r}")
    return value


def loads_config(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from None
    return _build(ExperimentConfig, raw, [], text)


def parse_config(path) -> ExperimentConfig:
    return loads_config(Path(path).read_text())


def config_to_toml(cfg: ExperimentConfig) -> str:
    """Render a config as TOML that parses back to an equal config."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines: list[str] = []
    tables: list[tuple[str, dict]] = []
    for k, v in asdict(cfg).items():
        if isinstance(v, dict):
            tables.append((k, v))
        else:
            lines.append(f"{k} = {fmt(v)}")

    def emit(name, d):
        nested = [(f"{name}.{k}", v) for k, v in d.items() if isinstance(v, dict)]
        lines.append(f"\n[{name}]")
        lines.extend(f"{k} = {fmt(v)}" for k, v in d.items() if not isinstance(v, dict))
        for n, sub in nested:
            emit(n, sub)

    for name, d in tables:
        emit(name, d)
    return "\n".join(lines) + "\n"
