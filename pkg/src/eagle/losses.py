"""Segmentation objectives (BCE, Dice, weighted sum) and overlap metrics."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import ShapeError

PROB_EPS = 1e-7
DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class LossWeights:
    dice: float = 1.0
    bce: float = 1.0

    def __post_init__(self):
        if self.dice < 0 or self.bce < 0 or self.dice + self.bce <= 0:
            raise ValueError(f"LossWeights must be non-negative with positive sum, got {self}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def scores(self) -> dict[str, float]:
        # Empty denominators count as perfect agreement (nothing to find, nothing claimed).
        dsc_den = 2 * self.tp + self.fp + self.fn
        return {
            "dsc": 2 * self.tp / dsc_den if dsc_den else 1.0,
            "precision": self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0,
            "recall": self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0,
        }


def _check(y, y_hat):
    if y.shape != y_hat.shape:
        raise ShapeError(f"mask shape {tuple(y.shape)} != prediction shape {tuple(y_hat.shape)}")


def bce(y: torch.Tensor, y_hat: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    _check(y, y_hat)
    p = y_hat.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def dice_loss(y: torch.Tensor, y_hat: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """``1 - (2 sum(y*p) + s) / (sum(y) + sum(p) + s)`` over all pixels of the batch."""
    _check(y, y_hat)
    inter = (y * y_hat).sum()
    return 1 - (2 * inter + smooth) / (y.sum() + y_hat.sum() + smooth)


def combined_loss(y: torch.Tensor, y_hat: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    return w.dice * dice_loss(y, y_hat) + w.bce * bce(y, y_hat)


def confusion(y: torch.Tensor, y_hat: torch.Tensor, threshold: float = 0.5) -> ConfusionCounts:
    _check(y, y_hat)
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    pred = y_hat >= threshold
    truth = y > 0.5
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    return ConfusionCounts(tp, fp, fn, pred.numel() - tp - fp - fn)


def metrics(y: torch.Tensor, y_hat: torch.Tensor, threshold: float = 0.5) -> dict[str, float]:
    return confusion(y, y_hat, threshold).scores()
