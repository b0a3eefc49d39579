"""Figures written next to the delimited reports (PNG, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_class_delta(delta: Sequence[float | None], class_names: Sequence[str], path,
                     title: str = "IoU difference per class", highlight: Sequence[int] = ()) -> Path:
    """Bar chart of per-class IoU deltas; undefined classes are drawn empty."""
    path = Path(path)
    vals = [0.0 if d is None else d * 100 for d in delta]
    colors = ["tab:orange" if i in set(highlight) else "tab:blue" for i in range(len(vals))]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(range(len(vals)), vals, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(class_names, rotation=30, ha="right")
    ax.set_ylabel("IoU delta (points)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_curves(curves: Mapping[str, Sequence[tuple[int, float]]], path, metric: str = "mean_iou") -> Path:
    """Validation metric against fine-tuning step, one line per initialization."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, series in curves.items():
        if series:
            steps, values = zip(*series)
            ax.plot(steps, [v * 100 for v in values], marker="o", markersize=3, label=label)
    ax.set_xlabel("fine-tuning step")
    ax.set_ylabel(f"validation {metric} (x100)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
