"""EAGLE: patch embedding, state-space encoder with Haar downsampling, mirrored decoder."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import torch
import torch.nn as nn

from .cbam import CBAM
from .core import ShapeError, bilinear_upsample2x, silu
from .cvssb import CVSSBGroup
from .haar import HWTB
from .ss2d import Ss2dConfig


@dataclass
class EagleConfig:
    in_ch: int = 1
    out_ch: int = 1
    patch: int = 4
    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    depths: tuple[int, ...] = (2, 2, 4, 2)
    # Deepest decoder stage first; defaults to reversed(depths).
    decoder_depths: tuple[int, ...] | None = None
    cbam_stages: tuple[int, ...] = (4, 5)
    cbam_reduction: int = 16
    d_state: int = 16
    expand: int = 2
    d_conv: int = 3
    scan: str = "fused"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.depths = tuple(int(d) for d in self.depths)
        self.cbam_stages = tuple(int(s) for s in self.cbam_stages)
        if self.decoder_depths is None:
            self.decoder_depths = tuple(reversed(self.depths))
        self.decoder_depths = tuple(int(d) for d in self.decoder_depths)
        self.validate()

    def validate(self) -> None:
        if len(self.channels) != 5:
            raise ValueError(f"channels must have 5 entries, got {list(self.channels)}")
        for a, b in zip(self.channels, self.channels[1:]):
            if b != 2 * a:
                raise ValueError(f"channels must double stage to stage, got {list(self.channels)}")
        if len(self.depths) != 4 or min(self.depths) < 1:
            raise ValueError(f"depths must be 4 positive integers, got {list(self.depths)}")
        if len(self.decoder_depths) != 4 or min(self.decoder_depths) < 1:
            raise ValueError(f"decoder_depths must be 4 positive integers, got {list(self.decoder_depths)}")
        if self.patch < 2 or self.patch & (self.patch - 1):
            raise ValueError(f"patch must be a power of two >= 2, got {self.patch}")
        if self.channels[0] % self.patch:
            raise ValueError(f"channels[0]={self.channels[0]} must be divisible by patch={self.patch}")
        for s in self.cbam_stages:
            if s not in (2, 3, 4, 5):
                raise ValueError(f"cbam_stages entries must be in 2..5, got {s}")
        self.ss2d  # validates the scan settings

    @property
    def ss2d(self) -> Ss2dConfig:
        return Ss2dConfig(d_state=self.d_state, expand=self.expand, d_conv=self.d_conv, scan=self.scan)

    @property
    def multiple(self) -> int:
        """Input H and W must be multiples of this."""
        return self.patch * 16

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


class EncoderFeatures(NamedTuple):
    F1: torch.Tensor
    F2: torch.Tensor
    F3: torch.Tensor
    F4: torch.Tensor
    F5: torch.Tensor


def expected_feature_shapes(cfg: EagleConfig, h: int, w: int) -> list[tuple[int, int, int]]:
    """``F_i`` is ``channels[i-1] x H/2^(i+1) x W/2^(i+1)`` for patch 4."""
    base = cfg.patch
    return [(c, h // (base * 2 ** i), w // (base * 2 ** i)) for i, c in enumerate(cfg.channels)]


class PatchEmbed(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, patch: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_ch, out_ch, patch, stride=patch)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ShapeError(f"PatchEmbed: H={h}, W={w} not divisible by patch {self.patch}")
        return self.proj(x)


class EncoderStage(nn.Module):
    def __init__(self, in_ch: int, depth: int, ss2d_cfg: Ss2dConfig, cbam: CBAM | None):
        super().__init__()
        self.blocks = CVSSBGroup(in_ch, 2, depth, ss2d_cfg)
        self.cbam = cbam
        self.down = HWTB(self.blocks.out_ch)

    def forward(self, x):
        x = self.blocks(x)
        if self.cbam is not None:
            x = self.cbam(x)
        return self.down(x)


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, depth: int, ss2d_cfg: Ss2dConfig, cbam: CBAM | None):
        super().__init__()
        self.blocks = CVSSBGroup(in_ch, Fraction(1, 2), depth, ss2d_cfg)
        out = self.blocks.out_ch
        self.cbam = cbam
        self.fuse = nn.Conv2d(2 * out, out, 1)

    def forward(self, x, skip):
        x = self.blocks(bilinear_upsample2x(x))
        if self.cbam is not None:
            x = self.cbam(x)
        if x.shape != skip.shape:
            raise ShapeError(f"DecoderStage: decoded {tuple(x.shape)} vs skip {tuple(skip.shape)}")
        return self.fuse(torch.cat([x, skip], dim=1))


class PatchExpansion(nn.Module):
    """log2(patch) blocks of (3x3 conv halving channels, bilinear x2), then 1x1 to out_ch.

    SiLU sits between blocks. Without it the blocks and head collapse into one
    linear map whose output is a bilinear upsampling of the coarsest logit
    grid. None follows the last block: with the tapered width (2 channels in
    the smallest configs) a bounded activation there caps the logit scale.
    """

    def __init__(self, in_ch: int, out_ch: int, patch: int):
        super().__init__()
        convs = []
        c = in_ch
        while patch > 1:
            convs.append(nn.Conv2d(c, c // 2, 3, padding=1))
            c //= 2
            patch //= 2
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv2d(c, out_ch, 1)

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = bilinear_upsample2x(conv(x))
            if i < len(self.convs) - 1:
                x = silu(x)
        return self.head(x)


class Eagle(nn.Module):
    def __init__(self, cfg: EagleConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EagleConfig()
        ch, ss = cfg.channels, cfg.ss2d

        def cbam(stage, c):
            return CBAM(c, cfg.cbam_reduction) if stage in cfg.cbam_stages else None

        self.embed = PatchEmbed(cfg.in_ch, ch[0], cfg.patch)
        # encoder stage i (2..5) maps ch[i-2] -> ch[i-1]
        self.encoder = nn.ModuleList(
            EncoderStage(ch[i - 2], cfg.depths[i - 2], ss, cbam(i, ch[i - 1])) for i in range(2, 6)
        )
        # decoder stage k (4..1) consumes level k+1 and emits ch[k-1]
        self.decoder = nn.ModuleList(
            DecoderStage(ch[k], cfg.decoder_depths[4 - k], ss, cbam(k + 1, ch[k - 1])) for k in range(4, 0, -1)
        )
        self.expand = PatchExpansion(ch[0], cfg.out_ch, cfg.patch)

    def check_input(self, x):
        m = self.cfg.multiple
        if x.dim() != 4 or x.shape[1] != self.cfg.in_ch:
            raise ShapeError(f"Eagle: expected [B, {self.cfg.in_ch}, H, W], got {tuple(x.shape)}")
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"Eagle: H={x.shape[2]}, W={x.shape[3]} must be multiples of {m}")

    def encode(self, x) -> EncoderFeatures:
        self.check_input(x)
        feats = [self.embed(x)]
        for stage in self.encoder:
            feats.append(stage(feats[-1]))
        return EncoderFeatures(*feats)

    def decode(self, f: EncoderFeatures) -> torch.Tensor:
        return torch.sigmoid(self.decode_logits(f))

    def decode_logits(self, f: EncoderFeatures) -> torch.Tensor:
        skips = list(f)
        d = skips[4]
        for k, stage in zip(range(4, 0, -1), self.decoder):
            d = stage(d, skips[k - 1])
        return self.expand(d)

    def forward(self, x):
        return self.decode(self.encode(x))


def count_params(model_or_cfg) -> int:
    model = model_or_cfg if isinstance(model_or_cfg, nn.Module) else Eagle(model_or_cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def forward(x: torch.Tensor, model: Eagle) -> torch.Tensor:
    return model(x)
