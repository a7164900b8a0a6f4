"""Static plot emitters (always files, never interactive windows)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import DataError


def plot_loss_curves(log_path: str | Path, out_path: str | Path) -> Path:
    """One panel per logged scalar series from a line-delimited loss log."""
    log_path = Path(log_path)
    if not log_path.exists():
        raise DataError(f"loss log not found: {log_path}")
    records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    if not records:
        raise DataError(f"loss log {log_path} is empty")
    steps = [r["step"] for r in records]
    series = sorted(k for k in records[0] if k != "step")
    ncols = 3
    nrows = (len(series) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 2.5 * nrows), squeeze=False)
    for ax, name in zip(axes.ravel(), series):
        ax.plot(steps, [r.get(name) for r in records], lw=0.8)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
    for ax in axes.ravel()[len(series) :]:
        ax.axis("off")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_failure_bars(per_tissue: dict[str, dict], out_path: str | Path) -> Path:
    """Failure rate and mean DAB KL by tissue type as paired bar panels."""
    if not per_tissue:
        raise DataError("no per-tissue rows to plot")
    tissues = list(per_tissue)
    rates = [per_tissue[t]["failure_rate"] for t in tissues]
    kls = [per_tissue[t]["mean_dab_kl"] for t in tissues]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax1.bar(range(len(tissues)), rates, color="#b03030")
    ax1.set_ylabel("failure rate")
    ax2.bar(range(len(tissues)), kls, color="#305ab0")
    ax2.set_ylabel("mean DAB KL")
    for ax in (ax1, ax2):
        ax.set_xticks(range(len(tissues)))
        ax.set_xticklabels(tissues, rotation=30, ha="right", fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
