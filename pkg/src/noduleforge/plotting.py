"""Report figures written as PNG files (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

STYLE = {"figure.dpi": 110, "font.size": 9, "axes.spines.top": False, "axes.spines.right": False}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_pr_curves(curves: Mapping[str, object], path, title: str = "Precision-recall") -> Path:
    """Step plot of precision against recall, one line per named :class:`PRCurve`."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        for name, curve in curves.items():
            r = np.concatenate([[0.0], curve.recalls])
            p = np.concatenate([[1.0], curve.precisions])
            ax.step(r, p, where="post", label=name)
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def plot_training(logs: Sequence, path, smooth: int = 5) -> Path:
    """Loss curves (left) and validation AP with a trailing ``smooth``-epoch mean (right)."""
    epochs = np.array([e.epoch for e in logs])
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        a1.plot(epochs, [e.train_loss for e in logs], label="train")
        val = np.array([e.val_loss for e in logs])
        if np.isfinite(val).any():
            a1.plot(epochs, val, label="validation")
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a1.legend(frameon=False)
        ap50 = np.array([e.ap50 for e in logs])
        if np.isfinite(ap50).any():
            a2.plot(epochs, ap50, alpha=0.4, label="AP0.5")
            a2.plot(epochs, trailing_mean(ap50, smooth), label=f"AP0.5 ({smooth}-epoch mean)")
            ap = np.array([e.ap for e in logs])
            a2.plot(epochs, ap, alpha=0.4, label="AP")
            a2.plot(epochs, trailing_mean(ap, smooth), label=f"AP ({smooth}-epoch mean)")
            a2.legend(frameon=False, fontsize=7)
        a2.set_xlabel("epoch")
        a2.set_ylabel("validation AP")
        return _save(fig, path)


def plot_ablation(results: Mapping[str, Dict[str, Sequence[float]]], path) -> Path:
    """Grouped bars: per-variant medians over seeds, with individual seeds as dots."""
    variants = list(results)
    metrics = list(next(iter(results.values())))
    x = np.arange(len(variants))
    width = 0.8 / max(len(metrics), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for k, metric in enumerate(metrics):
            vals = [np.asarray(results[v][metric], dtype=float) for v in variants]
            pos = x + (k - (len(metrics) - 1) / 2) * width
            ax.bar(pos, [np.median(v) for v in vals], width, label=metric, alpha=0.8)
            for p, v in zip(pos, vals):
                ax.scatter(np.full(len(v), p), v, s=8, color="k", zorder=3)
        ax.set_xticks(x)
        ax.set_xticklabels(variants)
        ax.set_ylabel("AP (median over seeds)")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)


def trailing_mean(values: Sequence[float], window: int) -> np.ndarray:
    """Mean of the last ``window`` values at each position (shorter at the start)."""
    v = np.asarray(values, dtype=float)
    out = np.empty_like(v)
    for i in range(len(v)):
        out[i] = v[max(0, i - window + 1): i + 1].mean()
    return out
