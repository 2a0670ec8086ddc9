"""Figures written next to the line-delimited training and evaluation records."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# TP / FN / FP overlay colours
TP_RGB = (0.0, 0.8, 0.0)
FN_RGB = (1.0, 0.41, 0.71)
FP_RGB = (0.1, 0.3, 1.0)

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def plot_history(records: Sequence[dict], path) -> Path:
    """Loss, overlap metrics and learning rate per epoch."""
    path = Path(path)
    ep = [r["epoch"] for r in records]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        ax = axes[0]
        ax.plot(ep, [r["train_loss"] for r in records], label="train")
        ax.plot(ep, [r["val_loss"] for r in records], label="val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("Dice + BCE")
        ax.legend(frameon=False)

        ax = axes[1]
        for key in ("dsc", "precision", "recall"):
            ax.plot(ep, [r[key] for r in records], label=key)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("epoch")
        ax.legend(frameon=False)

        ax = axes[2]
        ax.step(ep, [r["lr"] for r in records], where="post")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("learning rate")

        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def overlay(image: np.ndarray, mask: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """RGB image with TP, FN and FP pixels painted over the grayscale slice."""
    img = np.clip(np.asarray(image, dtype=np.float64).squeeze(), 0, 1)
    m = np.asarray(mask).squeeze() > 0.5
    p = np.asarray(pred).squeeze() > 0.5
    rgb = np.repeat(img[..., None], 3, axis=-1)
    for sel, colour in ((m & p, TP_RGB), (m & ~p, FN_RGB), (~m & p, FP_RGB)):
        rgb[sel] = 0.35 * rgb[sel] + 0.65 * np.asarray(colour)
    return rgb


def plot_overlays(images, masks, probs, ids, path, threshold: float = 0.5, max_items: int = 8) -> Path:
    path = Path(path)
    n = min(len(images), max_items)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(2, n, figsize=(1.8 * n, 3.8), squeeze=False)
        for i in range(n):
            axes[0, i].imshow(np.asarray(images[i]).squeeze(), cmap="gray", vmin=0, vmax=1)
            axes[0, i].set_title(str(ids[i]), fontsize=7)
            axes[1, i].imshow(overlay(images[i], masks[i], np.asarray(probs[i]) >= threshold))
            for ax in axes[:, i]:
                ax.set_axis_off()
        fig.text(0.01, 0.01, "green TP, pink FN, blue FP", fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
