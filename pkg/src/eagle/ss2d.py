"""Four-direction 2D selective scan.

The recurrence along one flattened direction is

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
    y_t = <C_t, h_t> + D * u_t

with a diagonal, strictly negative ``A``. It is a first-order linear
recurrence ``h_t = a_t h_{t-1} + b_t`` whose pairs ``(a, b)`` compose
associatively, which is what the parallel variant exploits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ChannelLayerNorm, ShapeError, silu

DIRECTIONS = ("row_fwd", "row_bwd", "col_fwd", "col_bwd")
SCANS = ("fused", "parallel", "sequential")


@dataclass(frozen=True)
class Ss2dConfig:
    d_state: int = 16
    expand: int = 2
    d_conv: int = 3
    dt_min: float = 0.001
    dt_max: float = 0.1
    scan: str = "fused"

    def __post_init__(self):
        if self.expand < 1 or self.d_state < 1:
            raise ValueError(f"Ss2dConfig: expand and d_state must be >= 1, got {self.expand}, {self.d_state}")
        if self.d_conv % 2 == 0:
            raise ValueError(f"Ss2dConfig: d_conv must be odd, got {self.d_conv}")
        if self.scan not in SCANS:
            raise ValueError(f"Ss2dConfig: scan must be one of {SCANS}, got {self.scan!r}")


# --------------------------------------------------------------------------
# direction reordering


def flatten_direction(x: torch.Tensor, direction: str) -> torch.Tensor:
    """``[..., C, H, W] -> [..., C, H*W]`` in the raster order of ``direction``."""
    if direction in ("row_fwd", "row_bwd"):
        seq = x.flatten(-2)
    elif direction in ("col_fwd", "col_bwd"):
        seq = x.transpose(-1, -2).flatten(-2)
    else:
        raise ValueError(f"unknown scan direction {direction!r}")
    if direction.endswith("bwd"):
        seq = seq.flip(-1)
    return seq


def unflatten_direction(seq: torch.Tensor, direction: str, h: int, w: int) -> torch.Tensor:
    if seq.shape[-1] != h * w:
        raise ShapeError(f"unflatten_direction: length {seq.shape[-1]} != {h}*{w}")
    if direction.endswith("bwd"):
        seq = seq.flip(-1)
    if direction in ("row_fwd", "row_bwd"):
        return seq.unflatten(-1, (h, w))
    if direction in ("col_fwd", "col_bwd"):
        return seq.unflatten(-1, (w, h)).transpose(-1, -2)
    raise ValueError(f"unknown scan direction {direction!r}")


# --------------------------------------------------------------------------
# linear recurrence h_t = a_t * h_{t-1} + b_t along the last axis


def combine(left, right):
    """Compose two recurrence segments: apply ``left`` first, then ``right``."""
    a1, b1 = left
    a2, b2 = right
    return a1 * a2, a2 * b1 + b2


def linear_recurrence_seq(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    h = torch.zeros_like(b[..., 0]) if h0 is None else h0
    out = []
    for t in range(b.shape[-1]):
        h = a[..., t] * h + b[..., t]
        out.append(h)
    return torch.stack(out, dim=-1)


def linear_recurrence_parallel(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Inclusive scan by recursive doubling; ``ceil(log2 L)`` vectorised rounds."""
    if h0 is not None:
        b = torch.cat([(a[..., :1] * h0.unsqueeze(-1) + b[..., :1]), b[..., 1:]], dim=-1)
    n = b.shape[-1]
    offset = 1
    while offset < n:
        a_prev = F.pad(a[..., :-offset], (offset, 0), value=1.0)
        b_prev = F.pad(b[..., :-offset], (offset, 0), value=0.0)
        b = a * b_prev + b
        a = a * a_prev
        offset *= 2
    return b


# --------------------------------------------------------------------------
# selective scan


def _discretize_checks(u, delta, A, B):
    if u.shape != delta.shape:
        raise ShapeError(f"selective_scan: u {tuple(u.shape)} and delta {tuple(delta.shape)} differ")
    if not bool(torch.isfinite(delta).all()):
        raise FloatingPointError("selective_scan: delta contains NaN or Inf")
    if not bool((delta > 0).all()):
        raise ValueError("selective_scan: delta must be strictly positive")
    if A.shape[-2] != u.shape[-2]:
        raise ShapeError(f"selective_scan: A has {A.shape[-2]} rows, u has {u.shape[-2]} channels")
    if B.shape[-1] != u.shape[-1] or B.shape[-2] != A.shape[-1]:
        raise ShapeError(f"selective_scan: B {tuple(B.shape)} inconsistent with A {tuple(A.shape)} / L={u.shape[-1]}")


def _discretize(u, delta, A, B):
    _discretize_checks(u, delta, A, B)
    dA = delta.unsqueeze(-2) * A.unsqueeze(-1)                       # [..., D, N, L]
    a = torch.exp(dA)
    b = (delta * u).unsqueeze(-2) * B.unsqueeze(-3)                   # [..., D, N, L]
    return a, b


def _readout(h, u, C, D):
    if C.shape[-2:] != h.shape[-2:]:
        raise ShapeError(f"selective_scan: C {tuple(C.shape)} inconsistent with state {tuple(h.shape)}")
    y = (h * C.unsqueeze(-3)).sum(-2)
    if D is not None:
        y = y + D.unsqueeze(-1) * u
    return y


def selective_scan_seq(u, delta, A, B, C, D=None, h0=None, return_state=False):
    """Step-by-step selective scan.

    Shapes: ``u, delta: [..., D, L]``, ``A: [..., D, N]`` (negative),
    ``B, C: [..., N, L]``, ``D: [..., D]``, ``h0: [..., D, N]``.
    """
    a, b = _discretize(u, delta, A, B)
    h = linear_recurrence_seq(a, b, h0)
    y = _readout(h, u, C, D)
    return (y, h[..., -1]) if return_state else y


def selective_scan_parallel(u, delta, A, B, C, D=None, h0=None, return_state=False):
    a, b = _discretize(u, delta, A, B)
    h = linear_recurrence_parallel(a, b, h0)
    y = _readout(h, u, C, D)
    return (y, h[..., -1]) if return_state else y


def selective_scan_fused(u, delta, A, B, C, D=None):
    from .fused_scan import selective_scan_fused as _fused

    return _fused(u, delta, A, B, C, D)


def a_from_log(A_log: torch.Tensor) -> torch.Tensor:
    return -torch.exp(A_log)


# --------------------------------------------------------------------------
# block


class SS2D(nn.Module):
    """Linear expand, depthwise conv, four directional scans, LN, SiLU gate, linear project.

    Each direction owns its scan parameters (x_proj, dt_proj, A_log, D);
    the in/out projections are shared.
    """

    def __init__(self, d_model: int, cfg: Ss2dConfig = Ss2dConfig()):
        super().__init__()
        self.cfg = cfg
        self.d_model = d_model
        self.d_inner = d_inner = cfg.expand * d_model
        self.dt_rank = dt_rank = max(1, math.ceil(d_model / 16))
        n, k = cfg.d_state, len(DIRECTIONS)

        self.in_proj = nn.Conv2d(d_model, 2 * d_inner, 1, bias=False)
        self.dwconv = nn.Conv2d(d_inner, d_inner, cfg.d_conv, padding=cfg.d_conv // 2, groups=d_inner)

        self.x_proj_weight = nn.Parameter(torch.empty(k, dt_rank + 2 * n, d_inner))
        bound = d_inner ** -0.5
        nn.init.uniform_(self.x_proj_weight, -bound, bound)

        self.dt_proj_weight = nn.Parameter(torch.empty(k, d_inner, dt_rank))
        nn.init.uniform_(self.dt_proj_weight, -dt_rank ** -0.5, dt_rank ** -0.5)
        dt = torch.exp(
            torch.rand(k, d_inner) * (math.log(cfg.dt_max) - math.log(cfg.dt_min)) + math.log(cfg.dt_min)
        ).clamp(min=1e-4)
        # inverse softplus so that softplus(bias) lands in [dt_min, dt_max]
        self.dt_proj_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))

        a_init = torch.arange(1, n + 1, dtype=torch.get_default_dtype()).repeat(k, d_inner, 1)
        self.A_log = nn.Parameter(torch.log(a_init))
        self.D = nn.Parameter(torch.ones(k, d_inner))

        self.out_norm = ChannelLayerNorm(d_inner)
        self.out_proj = nn.Conv2d(d_inner, d_model, 1, bias=False)

    def scan_params(self, seqs: torch.Tensor):
        """Per-step delta, B, C for stacked directional sequences ``[B, K, Di, L]``."""
        n, r = self.cfg.d_state, self.dt_rank
        x_dbl = torch.einsum("bkdl,kcd->bkcl", seqs, self.x_proj_weight)
        dt_low, Bs, Cs = torch.split(x_dbl, [r, n, n], dim=2)
        dt = torch.einsum("bkrl,kdr->bkdl", dt_low, self.dt_proj_weight)
        delta = F.softplus(dt + self.dt_proj_bias.unsqueeze(-1))
        return delta, Bs, Cs

    def scan_directions(self, xs: torch.Tensor) -> list[torch.Tensor]:
        """Run the four scans on ``[B, Di, H, W]``; returns per-direction maps in DIRECTIONS order."""
        h, w = xs.shape[-2:]
        seqs = torch.stack([flatten_direction(xs, d) for d in DIRECTIONS], dim=1)
        delta, Bs, Cs = self.scan_params(seqs)
        scan = {
            "fused": selective_scan_fused,
            "parallel": selective_scan_parallel,
            "sequential": selective_scan_seq,
        }[self.cfg.scan]
        ys = scan(seqs, delta, a_from_log(self.A_log), Bs, Cs, self.D)
        return [unflatten_direction(ys[:, i], d, h, w) for i, d in enumerate(DIRECTIONS)]

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.d_model:
            raise ShapeError(f"SS2D: expected [B, {self.d_model}, H, W], got {tuple(x.shape)}")
        xs, z = self.in_proj(x).chunk(2, dim=1)
        xs = silu(self.dwconv(xs))
        maps = self.scan_directions(xs)
        y = maps[0]
        for m in maps[1:]:
            y = y + m
        y = self.out_norm(y) * silu(z)
        return self.out_proj(y)
