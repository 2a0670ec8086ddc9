"""Channel-then-spatial attention gating."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ShapeError, conv2d, relu


class CBAM(nn.Module):
    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"CBAM: reduction {reduction} must divide channels {channels}")
        if spatial_kernel % 2 == 0:
            raise ValueError(f"CBAM: spatial kernel must be odd, got {spatial_kernel}")
        hidden = channels // reduction
        self.channels = channels
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2)

    def _mlp(self, v):
        return self.fc2(relu(self.fc1(v)))

    def channel_gate(self, x):
        avg = x.mean(dim=(2, 3), keepdim=True)
        mx = x.amax(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self._mlp(avg) + self._mlp(mx))

    def spatial_gate(self, x):
        desc = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        # replicate padding keeps the gate constant on spatially constant input
        desc = F.pad(desc, [self.spatial.padding[0]] * 4, mode="replicate")
        return torch.sigmoid(conv2d(desc, self.spatial.weight, self.spatial.bias))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"CBAM: expected [B, {self.channels}, H, W], got {tuple(x.shape)}")
        x = x * self.channel_gate(x)
        return x * self.spatial_gate(x)


def cbam_forward(x: torch.Tensor, block: CBAM) -> torch.Tensor:
    return block(x)
