"""Figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(path: str | Path, curves: dict[str, Sequence[float]], window: int = 50) -> Path:
    """Raw training loss (faint) with a running mean, one line per run."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for label, losses in curves.items():
            y = np.asarray(losses, dtype=float)
            x = np.arange(1, len(y) + 1)
            line, = ax.plot(x, y, alpha=0.25, lw=0.6)
            if len(y) >= window:
                smooth = np.convolve(y, np.ones(window) / window, mode="valid")
                ax.plot(x[window - 1:], smooth, color=line.get_color(), lw=1.4, label=label)
            else:
                line.set_label(label)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("L1 loss")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_metrics(path: str | Path, ids: Sequence[str], psnr_db: Sequence[float], baseline: Sequence[float] | None = None) -> Path:
    """Per-image PSNR bars, optionally against a baseline (e.g. the degraded input)."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(ids) + 1.5), 3))
        x = np.arange(len(ids))
        w = 0.4 if baseline is not None else 0.7
        if baseline is not None:
            ax.bar(x - w / 2, baseline, w, label="input", color="0.7")
            ax.bar(x + w / 2, psnr_db, w, label="restored")
            ax.legend(frameon=False)
        else:
            ax.bar(x, psnr_db, w)
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=45, ha="right")
        ax.set_ylabel("PSNR (dB, Y)")
        return _save(fig, Path(path))
