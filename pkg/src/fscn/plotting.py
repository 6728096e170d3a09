"""Static report figures: loss curves, depth panels and ablation bars."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curve(loss_log: Sequence[tuple], path, window: int = 50) -> Path:
    """Raw and running-median loss against step, with the learning rate on a twin axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if loss_log:
        steps, lrs, losses = (np.asarray(c, dtype=float) for c in zip(*loss_log))
        ax.plot(steps, losses, lw=0.6, alpha=0.45, color="tab:blue", label="loss")
        if len(losses) >= window:
            med = np.array([np.median(losses[max(0, i - window + 1) : i + 1]) for i in range(len(losses))])
            ax.plot(steps, med, lw=1.5, color="tab:blue", label=f"median ({window} steps)")
        ax2 = ax.twinx()
        ax2.plot(steps, lrs, lw=1.0, ls="--", color="tab:orange")
        ax2.set_ylabel("learning rate", color="tab:orange")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("scale-invariant log loss")
    return _save(fig, path)


def plot_depth_panel(rgb: np.ndarray, gt: np.ndarray, pred: np.ndarray, path, max_depth_m: float) -> Path:
    """Rows of (rgb, ground truth, prediction, absolute error) for up to four samples."""
    rgb = np.asarray(rgb)
    n = min(4, len(rgb))
    fig, axes = plt.subplots(n, 4, figsize=(12, 1.8 * n + 0.4), squeeze=False)
    for i in range(n):
        valid = gt[i] > 0
        err = np.where(valid, np.abs(pred[i] - gt[i]), np.nan)
        panels = [
            (np.clip(rgb[i].transpose(1, 2, 0), 0, 1), {}),
            (np.where(valid, gt[i], np.nan), dict(cmap="magma_r", vmin=0, vmax=max_depth_m)),
            (pred[i], dict(cmap="magma_r", vmin=0, vmax=max_depth_m)),
            (err, dict(cmap="viridis", vmin=0, vmax=0.25 * max_depth_m)),
        ]
        for ax, (img, kw) in zip(axes[i], panels):
            ax.imshow(img, **kw)
            ax.set_xticks([])
            ax.set_yticks([])
    for ax, title in zip(axes[0], ("rgb", "ground truth", "prediction", "|error|")):
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_ablation(labels: Sequence[str], values: Sequence[float], params: Sequence[int], path, metric: str = "rms") -> Path:
    fig, ax = plt.subplots(figsize=(1.6 * len(labels) + 2, 3.5))
    bars = ax.bar(range(len(labels)), values, color="tab:gray")
    for b, p in zip(bars, params):
        ax.annotate(f"{p / 1e3:.0f}k params", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylabel(f"median {metric}")
    return _save(fig, path)
