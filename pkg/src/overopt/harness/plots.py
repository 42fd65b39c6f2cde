"""Gold and proxy reward against KL, one series per method with +-1 std bands.

Plots are drawn straight from the aggregated curve tables, row for row. SVG output is
byte-deterministic: fixed hash salt, no date metadata, fixed figure geometry.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"single": "#d62728", "multihead": "#1f77b4", "ensemble": "#2ca02c"}


def read_series(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    cols = {h: [] for h in header}
    for ln in lines[1:]:
        for h, v in zip(header, ln.split(",")):
            cols[h].append(v)
    out = {}
    for h, vals in cols.items():
        try:
            out[h] = np.array([float(v) for v in vals])
        except ValueError:
            out[h] = np.array(vals)
    return out


def _chart(series: dict[str, dict[str, np.ndarray]], column: str, ylabel: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for i, (method, s) in enumerate(series.items()):
        color = COLORS.get(method, f"C{i}")
        mean, std = s[f"{column}_mean"], s[f"{column}_std"]
        ax.plot(s["kl"], mean, color=color, label=method, linewidth=1.5)
        ax.fill_between(s["kl"], mean - std, mean + std, color=color, alpha=0.2, linewidth=0)
    ax.set_xlabel("KL(policy || reference) [nats]")
    ax.set_ylabel(ylabel)
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    with plt.rc_context({"svg.hashsalt": "overopt", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_plots(curve_tables: dict[str, str | Path], out_dir) -> list[Path]:
    """Write gold_vs_kl.svg and proxy_vs_kl.svg from per-method aggregated curve CSVs."""
    if not curve_tables:
        raise ValueError("emit_plots: no curves")
    series = {m: read_series(p) for m, p in curve_tables.items()}
    for m, s in series.items():
        if len(s.get("kl", ())) == 0:
            raise ValueError(f"emit_plots: empty curve table for {m!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "gold_vs_kl.svg", out / "proxy_vs_kl.svg"]
    _chart(series, "gold_reward", "gold reward", paths[0])
    _chart(series, "proxy_reward", "proxy reward", paths[1])
    return paths
