"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software tag: PNG bytes then depend only on the plotted data
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(train_loss: Sequence[float], val_loss: Sequence[float], selected_epoch: int, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        epochs = np.arange(1, len(train_loss) + 1)
        ax.plot(epochs, train_loss, label="train", color="0.4")
        ax.plot(epochs, val_loss, label="validation", color="C3")
        if selected_epoch:
            ax.axvline(selected_epoch, color="C3", ls=":", lw=1)
            ax.annotate(f"selected {selected_epoch}", (selected_epoch, val_loss[selected_epoch - 1]),
                        textcoords="offset points", xytext=(4, 6), fontsize=7)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_grid(rows: Sequence[dict], param: str, path) -> Path:
    """Accuracy and average F-score against the swept coefficient."""
    xs = [r[param] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.plot(xs, [100 * r["accuracy"] for r in rows], "o-", label="accuracy", color="C0")
        ax.plot(xs, [100 * r["avg_f"] for r in rows], "s--", label="average F-score", color="C1")
        ax.set_xlabel(param.replace("lambda_", "λ_"))
        ax.set_ylabel("%")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_embedding(image: np.ndarray, seg: np.ndarray, embedded: np.ndarray, path, label_names=None) -> Path:
    """Input, label map and every embedded channel side by side."""
    k = embedded.shape[0]
    names = label_names or [str(i) for i in range(k)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, k + 2, figsize=(1.8 * (k + 2), 2.0))
        axes[0].imshow(image)
        axes[0].set_title("image")
        axes[1].imshow(seg, cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
        axes[1].set_title("labels")
        for c in range(k):
            axes[c + 2].imshow(embedded[c], cmap="gray", vmin=0, vmax=255)
            axes[c + 2].set_title(f"ch {names[c]}")
        for ax in axes:
            ax.set_axis_off()
        return _save(fig, path)
