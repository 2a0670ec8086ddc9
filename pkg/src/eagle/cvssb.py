"""Convolutional vision state-space block and its depthwise-aware FFN.

    Z1 = X + SS2D(LN(X))
    Y  = Conv1x1(Z1) + DAFFN(LN(Z1))

The first block of a group maps P channels to j*P (j = 2 going down,
j = 1/2 coming up); the remaining blocks keep the width.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import torch
import torch.nn as nn

from .core import ChannelLayerNorm, ShapeError, relu, silu
from .ss2d import SS2D, Ss2dConfig


@dataclass(frozen=True)
class CvssbConfig:
    in_ch: int
    ratio: Fraction = Fraction(1)
    first: bool = True
    ss2d: Ss2dConfig = field(default_factory=Ss2dConfig)

    @property
    def out_ch(self) -> int:
        if not self.first:
            return self.in_ch
        out = Fraction(self.ratio) * self.in_ch
        if out.denominator != 1 or out < 1:
            raise ValueError(f"CvssbConfig: j*P = {self.ratio}*{self.in_ch} is not a positive integer")
        return int(out)


class ChannelAttention(nn.Module):
    """Squeeze-excite gate: GAP -> 1x1 -> ReLU -> 1x1 -> sigmoid, multiplied back in."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def weights(self, x):
        return torch.sigmoid(self.fc2(relu(self.fc1(x.mean(dim=(2, 3), keepdim=True)))))

    def forward(self, x):
        return x * self.weights(x)


def channel_attention(x: torch.Tensor, ca: ChannelAttention) -> torch.Tensor:
    return ca(x)


class DAFFN(nn.Module):
    """SiLU -> 1x1 C->4C -> four chunks {dw1x1, dw3x3, dw5x5, 3x3} -> concat -> 1x1 4C->out -> CA."""

    def __init__(self, channels: int, out_channels: int | None = None, ca_reduction: int = 4):
        super().__init__()
        c = channels
        self.channels = c
        self.out_channels = out_channels = out_channels or 2 * c
        self.proj_in = nn.Conv2d(c, 4 * c, 1)
        self.dw1 = nn.Conv2d(c, c, 1, groups=c)
        self.dw3 = nn.Conv2d(c, c, 3, padding=1, groups=c)
        self.dw5 = nn.Conv2d(c, c, 5, padding=2, groups=c)
        self.conv4 = nn.Conv2d(c, c, 3, padding=1)
        self.proj_out = nn.Conv2d(4 * c, out_channels, 1)
        self.ca = ChannelAttention(out_channels, ca_reduction)

    def branches(self, x):
        x1, x2, x3, x4 = torch.chunk(self.proj_in(silu(x)), 4, dim=1)
        return self.dw1(x1), self.dw3(x2), self.dw5(x3), self.conv4(x4)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"DAFFN: expected {self.channels} channels, got {x.shape[1]}")
        return self.ca(self.proj_out(torch.cat(self.branches(x), dim=1)))


def daffn_forward(x: torch.Tensor, ffn: DAFFN) -> torch.Tensor:
    return ffn(x)


class CVSSB(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, ss2d_cfg: Ss2dConfig = Ss2dConfig(), ca_reduction: int = 4):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.norm1 = ChannelLayerNorm(in_ch)
        self.ss2d = SS2D(in_ch, ss2d_cfg)
        self.conv = nn.Conv2d(in_ch, out_ch, 1)
        self.norm2 = ChannelLayerNorm(in_ch)
        self.ffn = DAFFN(in_ch, out_ch, ca_reduction)

    @classmethod
    def from_config(cls, cfg: CvssbConfig) -> "CVSSB":
        return cls(cfg.in_ch, cfg.out_ch, cfg.ss2d)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"CVSSB: expected [B, {self.in_ch}, H, W], got {tuple(x.shape)}")
        z1 = x + self.ss2d(self.norm1(x))
        return self.conv(z1) + self.ffn(self.norm2(z1))


def cvssb_forward(x: torch.Tensor, block: CVSSB) -> torch.Tensor:
    return block(x)


class CVSSBGroup(nn.Sequential):
    """``depth`` stacked CVSSBs; only the first changes the channel count."""

    def __init__(self, in_ch: int, ratio, depth: int, ss2d_cfg: Ss2dConfig = Ss2dConfig()):
        if depth < 1:
            raise ValueError(f"CVSSBGroup: depth must be >= 1, got {depth}")
        out_ch = CvssbConfig(in_ch, Fraction(ratio), True, ss2d_cfg).out_ch
        blocks = [CVSSB(in_ch, out_ch, ss2d_cfg)]
        blocks += [CVSSB(out_ch, out_ch, ss2d_cfg) for _ in range(depth - 1)]
        super().__init__(*blocks)
        self.in_ch, self.out_ch, self.depth = in_ch, out_ch, depth


def cvssb_group(x: torch.Tensor, group: CVSSBGroup) -> torch.Tensor:
    return group(x)
