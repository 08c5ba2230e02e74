"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figsize(width=5.0, ratio=None):
    ratio = ratio or (math.sqrt(5) - 1) / 2
    return width, width * ratio


def plot_latency(reports, path: str | Path) -> Path:
    """Mean latency per model tag, grouped by input size."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_figsize())
        tags = [f"{r.tag}@{r.input_size}" for r in reports]
        means = [r.mean_ms for r in reports]
        p95 = [r.p95_ms for r in reports]
        x = np.arange(len(reports))
        ax.bar(x, means, color=["#c44e52" if "SOL" in t else "#4c72b0" for t in tags])
        ax.errorbar(x, means, yerr=[np.zeros(len(x)), np.subtract(p95, means)], fmt="none", ecolor="k", lw=0.8)
        for xi, r in zip(x, reports):
            ax.annotate(f"{r.fps:.1f} FPS", (xi, r.mean_ms), ha="center", va="bottom", fontsize=7,
                        xytext=(0, 2), textcoords="offset points")
        ax.set_xticks(x)
        ax.set_xticklabels(tags, rotation=30, ha="right")
        ax.set_ylabel("inference time (ms)")
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_training(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    epochs = [int(r["epoch"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_figsize())
        ax.plot(epochs, [float(r["loss"]) for r in rows], color="#4c72b0", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.set_yscale("log")
        ap = [float(r["ap50"]) for r in rows]
        if any(not math.isnan(a) for a in ap):
            ax2 = ax.twinx()
            ax2.plot(epochs, ap, color="#dd8452", label="val AP50")
            ax2.set_ylabel("AP50")
            ax2.set_ylim(0, 1)
            ax2.spines["right"].set_visible(True)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_confidence(image: np.ndarray, maps: Sequence[np.ndarray], labels: Sequence[str],
                    path: str | Path) -> Path:
    """Input image followed by one overlay panel per head level."""
    path = Path(path)
    img = np.asarray(image).reshape(3, *np.asarray(image).shape[-2:]).transpose(1, 2, 0)
    n = len(maps) + 1
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(1.8 * n, 2.0))
        axes = np.atleast_1d(axes)
        axes[0].imshow(np.clip(img, 0, 1))
        axes[0].set_title("input")
        for ax, m, lab in zip(axes[1:], maps, labels):
            ax.imshow(np.clip(img, 0, 1))
            ax.imshow(np.asarray(m).reshape(img.shape[:2]), cmap="inferno", alpha=0.6, vmin=0, vmax=1)
            ax.set_title(lab)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.savefig(path)
        plt.close(fig)
    return path
