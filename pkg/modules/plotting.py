"""Per-region correlation plots: manual (x) against automated (y) thickness."""
from __future__ import annotations

import logging
import math
from pathlib import Path

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from modules.thickness import ComparisonTable  # noqa: E402

logger = logging.getLogger(__name__)


def _fmt(x: float, digits: int = 2) -> str:
    return "n/a" if math.isnan(x) else f"{x:.{digits}f}"


def plot_correlations(table: ComparisonTable, path: str | Path, ncols: int = 4) -> None:
    rows = list(table)
    if not rows:
        logger.warning("No landmark has enough paired subjects; nothing to plot")
        return
    nrows = math.ceil(len(rows) / ncols)
    fig, axes = plt.subplots(nrows=nrows, ncols=ncols, figsize=(3.2 * ncols, 3.0 * nrows), squeeze=False)
    for ax, row in zip(axes.flat, rows):
        ax.scatter(row.manual, row.auto, s=14, color="#2563EB")
        lo = min(row.manual.min(), row.auto.min())
        hi = max(row.manual.max(), row.auto.max())
        ax.plot([lo, hi], [lo, hi], linestyle="--", linewidth=0.8, color="#6B7280")
        ax.set_title(row.name, fontsize=9)
        ax.set_xlabel("manual (mm)", fontsize=8)
        ax.set_ylabel("automated (mm)", fontsize=8)
        p_text = "<0.001" if not math.isnan(row.p) and row.p < 1e-3 else _fmt(row.p, 3)
        ax.text(
            0.03, 0.97, f"r={_fmt(row.r)}\np={p_text}\nICC={_fmt(row.icc)}",
            transform=ax.transAxes, va="top", fontsize=7,
        )
    for ax in list(axes.flat)[len(rows):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(str(path), dpi=150)
    plt.close(fig)
    logger.info("Wrote correlation plot to %s", path)
