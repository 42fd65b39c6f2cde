"""Synthetic preference data: prompts, completion pairs, gold labels with noise, and file I/O."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import GoldRewardModel, PolicyModel, dumps_model
from .seeding import stream

FILE_FORMAT = "overopt-preferences"
FILE_VERSION = 1
MAX_COLLISION_RETRIES = 16
TIE_TOLERANCE = 1e-12


class Label(enum.Enum):
    A_PREFERRED = "A"
    B_PREFERRED = "B"

    def inverted(self) -> "Label":
        return Label.B_PREFERRED if self is Label.A_PREFERRED else Label.A_PREFERRED


class DegeneratePolicyError(RuntimeError):
    """The reference policy keeps producing identical completions."""


class DatasetParseError(ValueError):
    pass


class DatasetVersionError(ValueError):
    pass


@dataclass(frozen=True)
class UnlabeledPair:
    prompt: tuple[int, ...]
    completion_a: tuple[int, ...]
    completion_b: tuple[int, ...]


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple[int, ...]
    completion_a: tuple[int, ...]
    completion_b: tuple[int, ...]
    label: Label
    flipped: bool
    gold_margin: float

    @property
    def clean_label(self) -> Label:
        """The pre-noise gold label."""
        return self.label.inverted() if self.flipped else self.label


@dataclass
class PreferenceDataset:
    pairs: list[PreferencePair]
    splits: dict[str, tuple[int, int]]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ranges = sorted(self.splits.values())
        pos = 0
        for lo, hi in ranges:
            if lo != pos or hi < lo:
                raise ValueError(f"splits must be disjoint and cover a prefix, got {self.splits}")
            pos = hi
        if pos > len(self.pairs):
            raise ValueError("splits extend past the end of the pair list")
        rate = self.metadata.get("noise_rate", 0.0)
        if not 0.0 <= rate < 0.5:
            raise ValueError(f"noise_rate must be in [0, 0.5), got {rate}")

    def split(self, name: str) -> list[PreferencePair]:
        lo, hi = self.splits[name]
        return self.pairs[lo:hi]

    def arrays(self, name: str | None = None) -> "PairArrays":
        return PairArrays.from_pairs(self.pairs if name is None else self.split(name))


@dataclass
class PairArrays:
    """Column view of a list of pairs, for batched training and evaluation."""

    prompts: np.ndarray
    a: np.ndarray
    b: np.ndarray
    a_preferred: np.ndarray        # noisy training label
    a_preferred_clean: np.ndarray  # gold label before noise

    @classmethod
    def from_pairs(cls, pairs: list[PreferencePair]) -> "PairArrays":
        return cls(
            np.array([p.prompt for p in pairs], dtype=np.int64),
            np.array([p.completion_a for p in pairs], dtype=np.int64),
            np.array([p.completion_b for p in pairs], dtype=np.int64),
            np.array([p.label is Label.A_PREFERRED for p in pairs]),
            np.array([p.clean_label is Label.A_PREFERRED for p in pairs]),
        )

    def __len__(self) -> int:
        return len(self.prompts)

    def seqs_a(self) -> np.ndarray:
        return np.concatenate([self.prompts, self.a], axis=1)

    def seqs_b(self) -> np.ndarray:
        return np.concatenate([self.prompts, self.b], axis=1)


def natural_distribution(vocab_size: int, seed: int) -> np.ndarray:
    """The seeded 'natural' unigram distribution: a uniform random point on the simplex."""
    return stream(seed, "natural-distribution").dirichlet(np.ones(vocab_size))


def generate_prompts(count: int, rng: np.random.Generator, natural_probs: np.ndarray,
                     prompt_len: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    return rng.choice(len(natural_probs), size=(count, prompt_len), p=natural_probs)


def generate_pairs(prompts: np.ndarray, reference: PolicyModel, seed: int) -> list[UnlabeledPair]:
    """Two independent reference samples per prompt, each pair on its own stream."""
    n = len(prompts)
    lc = reference.completion_len
    rngs = [stream(seed, "pair-sample", i) for i in range(n)]
    uniforms = np.stack([r.random((2, lc)) for r in rngs])       # (n, 2, L_c)
    both = np.concatenate([prompts, prompts])
    comps, _ = reference.sample_with_uniforms(both, np.concatenate([uniforms[:, 0], uniforms[:, 1]]))
    a, b = comps[:n], comps[n:].copy()
    for _ in range(MAX_COLLISION_RETRIES):
        same = np.flatnonzero((a == b).all(axis=1))
        if same.size == 0:
            break
        redraw = np.stack([rngs[i].random(lc) for i in same])
        b[same], _ = reference.sample_with_uniforms(prompts[same], redraw)
    else:
        if (a == b).all(axis=1).any():
            raise DegeneratePolicyError(
                f"identical completions after {MAX_COLLISION_RETRIES} retries; "
                "the reference policy has collapsed")
    return [UnlabeledPair(tuple(map(int, p)), tuple(map(int, x)), tuple(map(int, y)))
            for p, x, y in zip(prompts, a, b)]


def gold_fingerprint(gold: GoldRewardModel) -> str:
    return hashlib.sha256(dumps_model(gold)).hexdigest()[:16]


def gold_label(pairs: list[UnlabeledPair], gold: GoldRewardModel, noise_rate: float, seed: int,
               splits: dict[str, tuple[int, int]] | None = None,
               mode: str = "flip") -> PreferenceDataset:
    """Label by gold argmax (ties to A), then invert with probability ``noise_rate``.

    ``mode="bradley_terry"`` instead draws A with probability sigmoid(gold_margin);
    ``flipped`` then marks labels that disagree with the argmax.
    """
    if not 0.0 <= noise_rate < 0.5:
        raise ValueError(f"noise_rate must be in [0, 0.5), got {noise_rate}")
    if mode not in ("flip", "bradley_terry"):
        raise ValueError(f"unknown label mode {mode!r}")
    prompts = np.array([p.prompt for p in pairs], dtype=np.int64)
    a = np.array([p.completion_a for p in pairs], dtype=np.int64)
    b = np.array([p.completion_b for p in pairs], dtype=np.int64)
    margin = gold.score_batch(np.concatenate([prompts, a], 1)) - gold.score_batch(np.concatenate([prompts, b], 1))
    out = []
    for i, (pair, m) in enumerate(zip(pairs, margin)):
        u = stream(seed, "pair-noise", i).random()
        base = Label.A_PREFERRED if m >= 0 or abs(m) < TIE_TOLERANCE else Label.B_PREFERRED
        if mode == "flip":
            flipped = bool(u < noise_rate)
            label = base.inverted() if flipped else base
        else:
            p_a = 1.0 / (1.0 + np.exp(-m))
            label = Label.A_PREFERRED if u < p_a else Label.B_PREFERRED
            flipped = label is not base
        out.append(PreferencePair(pair.prompt, pair.completion_a, pair.completion_b,
                                  label, flipped, float(m)))
    meta = {"seed": seed, "noise_rate": noise_rate, "gold_fingerprint": gold_fingerprint(gold),
            "label_mode": mode}
    return PreferenceDataset(out, splits or {"train": (0, len(out))}, meta)


def build_dataset(gold: GoldRewardModel, reference: PolicyModel, natural_probs: np.ndarray,
                  seed: int, n_train: int = 4000, n_validation: int = 500,
                  noise_rate: float = 0.25, mode: str = "flip") -> PreferenceDataset:
    n = n_train + n_validation
    prompts = generate_prompts(n, stream(seed, "prompts"), natural_probs, reference.prompt_len)
    pairs = generate_pairs(prompts, reference, seed)
    splits = {"train": (0, n_train), "validation": (n_train, n)}
    return gold_label(pairs, gold, noise_rate, seed, splits, mode)


# --------------------------------------------------------------------- I/O


def _pair_record(p: PreferencePair) -> str:
    return json.dumps({"prompt": list(p.prompt), "a": list(p.completion_a), "b": list(p.completion_b),
                       "label": p.label.value, "flipped": p.flipped, "gold_margin": p.gold_margin},
                      separators=(",", ":"))


def dumps_dataset(ds: PreferenceDataset) -> str:
    header = {"format": FILE_FORMAT, "version": FILE_VERSION, "count": len(ds.pairs),
              "splits": {k: list(v) for k, v in ds.splits.items()}, "metadata": ds.metadata}
    lines = [json.dumps(header, separators=(",", ":"), sort_keys=True)]
    lines.extend(_pair_record(p) for p in ds.pairs)
    return "\n".join(lines) + "\n"


def save_dataset(ds: PreferenceDataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def _parse_pair(rec, lineno: int) -> PreferencePair:
    try:
        pair = PreferencePair(tuple(int(t) for t in rec["prompt"]), tuple(int(t) for t in rec["a"]),
                              tuple(int(t) for t in rec["b"]), Label(rec["label"]),
                              bool(rec["flipped"]), float(rec["gold_margin"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"line {lineno}: bad pair record ({exc})") from None
    if not isinstance(rec["flipped"], bool):
        raise DatasetParseError(f"line {lineno}: 'flipped' must be a boolean")
    return pair


def loads_dataset(text: str) -> PreferenceDataset:
    lines = text.split("\n")
    if not text.endswith("\n"):
        raise DatasetParseError(f"line {len(lines)}: truncated record (no trailing newline)")
    lines = lines[:-1]
    if not lines:
        raise DatasetParseError("line 1: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"line 1: bad header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FILE_FORMAT:
        raise DatasetParseError("line 1: not a preference dataset header")
    if header.get("version") != FILE_VERSION:
        raise DatasetVersionError(f"unsupported dataset version {header.get('version')!r}")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"line {lineno}: {exc.msg}") from None
        pairs.append(_parse_pair(rec, lineno))
    if len(pairs) != header.get("count"):
        raise DatasetParseError(
            f"line {len(lines) + 1}: expected {header.get('count')} pairs, found {len(pairs)}")
    try:
        return PreferenceDataset(pairs, {k: tuple(v) for k, v in header["splits"].items()},
                                 header["metadata"])
    except (KeyError, ValueError) as exc:
        raise DatasetParseError(f"line 1: {exc}") from None


def load_dataset(path) -> PreferenceDataset:
    return loads_dataset(Path(path).read_text())
