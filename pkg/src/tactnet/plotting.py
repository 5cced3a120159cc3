"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from math import sqrt
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (sqrt(5.0) - 1.0) / 2.0
WIDTH_IN = 6.4

STYLE = {
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}
SUBSET_COLORS = {"train": "#4c72b0", "val": "#dd8452", "test": "#55a868"}


def _figure(scale=1.0, height=None):
    return plt.figure(figsize=(WIDTH_IN * scale, height or WIDTH_IN * scale * GOLDEN))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def learning_curves(histories: dict, path) -> Path:
    """Train and validation accuracy per epoch, one colour per run label."""
    with plt.rc_context(STYLE):
        fig = _figure()
        ax = fig.add_subplot(111)
        for i, (label, rows) in enumerate(sorted(histories.items())):
            epochs = [r["epoch"] for r in rows]
            color = f"C{i}"
            ax.plot(epochs, [100 * r["train_acc"] for r in rows], color=color, label=f"{label} train")
            ax.plot(epochs, [100 * r["val_acc"] for r in rows], color=color, linestyle="--", label=f"{label} val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy [%]")
        ax.legend(ncol=2, frameon=False)
        return _save(fig, path)


def accuracy_bars(summaries: dict, path, subsets=("train", "val", "test")) -> Path:
    """Grouped mean accuracy per model with one-standard-deviation error bars."""
    names = list(summaries)
    width = 0.8 / len(subsets)
    with plt.rc_context(STYLE):
        fig = _figure()
        ax = fig.add_subplot(111)
        x = np.arange(len(names))
        for j, subset in enumerate(subsets):
            means = [100 * (summaries[n][subset]["mean"] or 0.0) for n in names]
            stds = [100 * summaries[n][subset]["std"] for n in names]
            ax.bar(x + (j - (len(subsets) - 1) / 2) * width, means, width, yerr=stds, capsize=3,
                   label=subset, color=SUBSET_COLORS.get(subset, f"C{j}"))
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        lowest = min(100 * (summaries[n][s]["mean"] or 0.0) for n in names for s in subsets)
        ax.set_ylim(max(0.0, lowest - 10), 100.5)
        ax.set_ylabel("mean accuracy [%]")
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def sweep_plot(sweep: dict, path, timing: dict | None = None) -> Path:
    """Test accuracy (and optional inference time) against tactel count."""
    levels = [e for e in sweep["levels"] if e.get("status") == "ok"]
    tactels = [e["tactels"] for e in levels]
    means = [100 * e["summary"]["test"]["mean"] for e in levels]
    stds = [100 * e["summary"]["test"]["std"] for e in levels]
    with plt.rc_context(STYLE):
        fig = _figure()
        ax = fig.add_subplot(111)
        ax.errorbar(tactels, means, yerr=stds, marker="o", capsize=3, color="C0", label="test accuracy")
        ax.set_xscale("log")
        ax.set_xticks(tactels)
        ax.set_xticklabels([f"{t}\n{e['grid'][0]}x{e['grid'][1]}" for t, e in zip(tactels, levels)])
        ax.minorticks_off()
        ax.set_xlabel("tactels")
        ax.set_ylabel("mean test accuracy [%]")
        if timing:
            ax2 = ax.twinx()
            ax2.spines["right"].set_visible(True)
            ax2.plot(tactels, [timing[e["level"]]["mean_ms"] for e in levels], marker="s", color="C3")
            ax2.set_ylabel("inference time [ms]", color="C3")
        ax.set_title(sweep["variant"])
        return _save(fig, path)


def confusion_heatmap(confusion, class_names, path, title="") -> Path:
    cm = np.asarray(confusion, dtype=np.float64)
    rows = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    with plt.rc_context(STYLE):
        fig = _figure(height=WIDTH_IN)
        ax = fig.add_subplot(111)
        im = ax.imshow(rows, cmap="Blues", vmin=0, vmax=1)
        ticks = np.arange(len(class_names))
        ax.set_xticks(ticks)
        ax.set_yticks(ticks)
        ax.set_xticklabels(class_names, rotation=90, fontsize=6)
        ax.set_yticklabels(class_names, fontsize=6)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)
