"""Curve statistics, cross-seed aggregation on a KL grid, and calibration of preference predictions."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .models import RewardModel
from .prefdata import TIE_TOLERANCE, PreferencePair
from .reward_training import AggregationObjective, aggregate_rows

CURVE_COLUMNS = ("step", "kl", "kl_stderr", "proxy_reward", "gold_reward", "seed", "method", "objective")
SMOOTHING_WINDOW = 3


@dataclass(frozen=True)
class CurvePoint:
    step: int
    kl: float
    kl_stderr: float
    proxy_reward: float
    gold_reward: float
    seed: int = 0
    method: str = "single"
    objective: str = "single(0)"


def curve_to_csv(points: Iterable[CurvePoint]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CURVE_COLUMNS) + "\n")
    for p in points:
        buf.write(f"{p.step},{p.kl!r},{p.kl_stderr!r},{p.proxy_reward!r},{p.gold_reward!r},"
                  f"{p.seed},{p.method},{p.objective}\n")
    return buf.getvalue()


def write_curve(points: Iterable[CurvePoint], path) -> None:
    Path(path).write_text(curve_to_csv(points))


def read_curve(path) -> list[CurvePoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [CurvePoint(int(r["step"]), float(r["kl"]), float(r["kl_stderr"]), float(r["proxy_reward"]),
                           float(r["gold_reward"]), int(r["seed"]), r["method"], r["objective"])
                for r in reader]


# ------------------------------------------------------------ curve stats


@dataclass(frozen=True)
class OveroptStats:
    peak_gold: float
    peak_step: int
    final_gold: float
    decline: float
    kl_at_peak: float


def smooth(values: Sequence[float]) -> np.ndarray:
    """Centered 3-point moving average; the window shrinks to 2 points at the ends."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 2:
        return v.copy()
    out = np.empty(n)
    out[0] = (v[0] + v[1]) / 2
    out[-1] = (v[-2] + v[-1]) / 2
    if n > 2:
        out[1:-1] = (v[:-2] + v[1:-1] + v[2:]) / 3
    return out


def overopt_stats(curve: Sequence[CurvePoint]) -> OveroptStats:
    """Peak and decline of the smoothed gold curve of a single run."""
    if not curve:
        raise ValueError("overopt_stats: empty curve")
    s = smooth([p.gold_reward for p in curve])
    i = int(np.argmax(s))
    return OveroptStats(peak_gold=float(s[i]), peak_step=curve[i].step, final_gold=float(s[-1]),
                        decline=float(s[i] - s[-1]), kl_at_peak=curve[i].kl)


def smoothed_range(curve: Sequence[CurvePoint]) -> float:
    s = smooth([p.gold_reward for p in curve])
    return float(s.max() - s.min())


@dataclass
class AggregatedCurve:
    method: str
    kl: np.ndarray
    gold_mean: np.ndarray
    gold_std: np.ndarray
    proxy_mean: np.ndarray
    proxy_std: np.ndarray
    n_runs: int

    def to_csv(self) -> str:
        rows = ["kl,proxy_reward_mean,proxy_reward_std,gold_reward_mean,gold_reward_std,method,n_runs"]
        cols = (self.kl, self.proxy_mean, self.proxy_std, self.gold_mean, self.gold_std)
        for vals in zip(*(c.tolist() for c in cols)):
            rows.append(",".join(repr(v) for v in vals) + f",{self.method},{self.n_runs}")
        return "\n".join(rows) + "\n"


def _interp_run(run: Sequence[CurvePoint], grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort([p.kl for p in run], kind="stable")
    kl = np.array([run[i].kl for i in order])
    gold = np.array([run[i].gold_reward for i in order])
    proxy = np.array([run[i].proxy_reward for i in order])
    return np.interp(grid, kl, gold), np.interp(grid, kl, proxy)


def kl_grid(runs: Sequence[Sequence[CurvePoint]], n_points: int = 50) -> np.ndarray:
    lo = max(min(p.kl for p in run) for run in runs)
    hi = min(max(p.kl for p in run) for run in runs)
    return np.linspace(lo, hi, n_points) if hi > lo else np.array([lo])


def aggregate_runs(curves_by_method: dict[str, list[Sequence[CurvePoint]]], n_points: int = 50,
                   grid: np.ndarray | None = None) -> dict[str, AggregatedCurve]:
    """Mean and sample std across runs after interpolating each run onto a common KL grid.

    Each run's points are ordered by KL before interpolation; the default grid is
    uniform between the largest per-run minimum and the smallest per-run maximum KL.
    """
    out = {}
    for method, runs in curves_by_method.items():
        if not runs:
            raise ValueError(f"aggregate_runs: no runs for method {method!r}")
        if any(len(run) < 2 for run in runs):
            raise ValueError(f"aggregate_runs: method {method!r} has a run with fewer than 2 points")
        g = kl_grid(runs, n_points) if grid is None else np.asarray(grid, dtype=np.float64)
        golds, proxies = zip(*(_interp_run(run, g) for run in runs))
        golds, proxies = np.array(golds), np.array(proxies)
        ddof = 1 if len(runs) > 1 else 0
        out[method] = AggregatedCurve(method, g, golds.mean(axis=0), golds.std(axis=0, ddof=ddof),
                                      proxies.mean(axis=0), proxies.std(axis=0, ddof=ddof), len(runs))
    return out


# ------------------------------------------------------------ calibration


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def predicted_preferences(model: RewardModel, objective: AggregationObjective, prompts: np.ndarray,
                          a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched P(A preferred) = sigmoid(r_obj(a) - r_obj(b))."""
    ra = aggregate_rows(model.rewards(np.concatenate([prompts, a], axis=1)), objective)
    rb = aggregate_rows(model.rewards(np.concatenate([prompts, b], axis=1)), objective)
    return _sigmoid(ra - rb)


def predicted_preference(model: RewardModel, objective: AggregationObjective, pair: PreferencePair) -> float:
    p = np.array([pair.prompt])
    return float(predicted_preferences(model, objective, p, np.array([pair.completion_a]),
                                       np.array([pair.completion_b]))[0])


@dataclass(frozen=True)
class CalibrationBin:
    low: float
    high: float
    confidence: float
    accuracy: float
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    n_bins: int
    bins: tuple[CalibrationBin, ...]
    ece: float
    objective: str = ""

    def to_table(self) -> str:
        rows = ["bin_low,bin_high,confidence,accuracy,count"]
        rows += [f"{b.low!r},{b.high!r},{b.confidence!r},{b.accuracy!r},{b.count}" for b in self.bins]
        rows.append(f"# objective={self.objective} ece={self.ece!r} n={sum(b.count for b in self.bins)}")
        return "\n".join(rows) + "\n"


def bin_edges(n_bins: int) -> np.ndarray:
    """Equal-width edges partitioning [0.5, 1]."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    return np.array([0.5 + b * 0.5 / n_bins for b in range(n_bins)] + [1.0])


def calibration_from_probs(p_a: np.ndarray, a_preferred: np.ndarray, n_bins: int = 10,
                           objective: str = "") -> CalibrationReport:
    """Folded reliability bins over [0.5, 1] and the expected calibration error.

    A prediction p is folded to max(p, 1 - p) and counted correct when its favored side
    (A when p >= 0.5) matches the label. Empty bins report NaN confidence/accuracy and
    contribute nothing to the ECE.
    """
    p_a = np.asarray(p_a, dtype=np.float64)
    a_preferred = np.asarray(a_preferred, dtype=bool)
    n = len(p_a)
    if n == 0:
        raise ValueError("calibration needs a non-empty evaluation set")
    conf = np.maximum(p_a, 1.0 - p_a)
    correct = (p_a >= 0.5) == a_preferred
    edges = bin_edges(n_bins)
    # bin b holds edges[b] <= conf < edges[b + 1]; the last bin also takes conf == 1
    idx = np.minimum(np.searchsorted(edges, conf, side="right") - 1, n_bins - 1)
    bins, terms = [], []
    for b in range(n_bins):
        sel = idx == b
        cnt = int(sel.sum())
        lo, hi = float(edges[b]), float(edges[b + 1])
        if cnt == 0:
            bins.append(CalibrationBin(lo, hi, math.nan, math.nan, 0))
            continue
        c = math.fsum(conf[sel].tolist()) / cnt
        acc = math.fsum(correct[sel].astype(np.float64).tolist()) / cnt
        bins.append(CalibrationBin(lo, hi, c, acc, cnt))
        terms.append((cnt / n) * abs(acc - c))
    return CalibrationReport(n_bins, tuple(bins), math.fsum(terms), objective)


def clean_a_preferred(pairs: Sequence[PreferencePair]) -> np.ndarray:
    """Pre-noise gold label of each pair, rebuilt from its gold margin (ties go to A)."""
    return np.array([p.gold_margin >= 0 or abs(p.gold_margin) < TIE_TOLERANCE for p in pairs])


def calibration_report(model: RewardModel, objective: AggregationObjective,
                       pairs: Sequence[PreferencePair], n_bins: int = 10,
                       use_noisy_labels: bool = False) -> CalibrationReport:
    if len(pairs) == 0:
        raise ValueError("calibration needs a non-empty evaluation set")
    prompts = np.array([p.prompt for p in pairs])
    a = np.array([p.completion_a for p in pairs])
    b = np.array([p.completion_b for p in pairs])
    probs = predicted_preferences(model, objective, prompts, a, b)
    if use_noisy_labels:
        labels = np.array([p.label.value == "A" for p in pairs])
    else:
        labels = clean_a_preferred(pairs)
    return calibration_from_probs(probs, labels, n_bins, str(objective))


def curve_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(CurvePoint))
