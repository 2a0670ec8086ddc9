"""Orthonormal single-level Haar transform and the wavelet downsampling block."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .core import ShapeError, conv2d, relu


class SubBands(NamedTuple):
    """Haar sub-bands, each ``[..., C, H/2, W/2]``; concat order is the field order."""

    low: torch.Tensor
    vert: torch.Tensor
    horiz: torch.Tensor
    diag: torch.Tensor

    def energy(self) -> torch.Tensor:
        return sum(b.pow(2).sum() for b in self)


def haar_forward(x: torch.Tensor) -> SubBands:
    """Split each 2x2 block ``[[a, b], [c, d]]`` into four orthonormal bands."""
    if x.dim() < 2:
        raise ShapeError(f"haar_forward: need at least [H, W], got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"haar_forward: H and W must be even, got H={h}, W={w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return SubBands(
        low=(a + b + c + d) / 2,
        vert=(a - b + c - d) / 2,
        horiz=(a + b - c - d) / 2,
        diag=(a - b - c + d) / 2,
    )


def haar_inverse(s: SubBands) -> torch.Tensor:
    shape = s.low.shape
    for band in s:
        if band.shape != shape:
            raise ShapeError(f"haar_inverse: band shapes differ: {[tuple(b.shape) for b in s]}")
    L, V, Hh, D = s
    out = L.new_empty(*shape[:-2], 2 * shape[-2], 2 * shape[-1])
    out[..., 0::2, 0::2] = (L + V + Hh + D) / 2
    out[..., 0::2, 1::2] = (L - V + Hh - D) / 2
    out[..., 1::2, 0::2] = (L + V - Hh - D) / 2
    out[..., 1::2, 1::2] = (L - V - Hh + D) / 2
    return out


def haar_pack(x: torch.Tensor) -> torch.Tensor:
    """``[B, C, H, W] -> [B, 4C, H/2, W/2]`` with bands stacked as [L, HV, HH, HD]."""
    return torch.cat(tuple(haar_forward(x)), dim=-3)


class HWTB(nn.Module):
    """Haar downsampling: pack sub-bands into channels, 1x1 conv 4C->C, BN, ReLU."""

    def __init__(self, channels: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.proj = nn.Conv2d(4 * channels, channels, kernel_size=1)
        self.bn = nn.BatchNorm2d(channels, eps=bn_eps, momentum=bn_momentum)
        # Lets tests and the identity fixture skip normalisation.
        self.use_bn = True

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.channels:
            raise ShapeError(f"HWTB: expected {self.channels} channels, got {x.shape[1]}")
        y = conv2d(haar_pack(x), self.proj.weight, self.proj.bias)
        if self.use_bn:
            y = self.bn(y)
        y = relu(y)
        return y.squeeze(0) if squeeze else y


def hwtb_forward(x: torch.Tensor, block: HWTB, mode: str = "train") -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    block.train(mode == "train")
    return block(x)
