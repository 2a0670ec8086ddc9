"""Dense tensor primitives used by every EAGLE block.

Tensors are plain ``torch.Tensor`` objects; reverse-mode differentiation is
torch autograd. This module adds the things the blocks rely on: explicit
shape validation with readable errors, channel-axis layer norm, the
activation set, a global precision switch, and a central-difference
gradient oracle that is independent of autograd.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


def set_precision(name: str) -> torch.dtype:
    """Set the default floating dtype (``"float32"`` or ``"float64"``)."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    torch.set_default_dtype(_DTYPES[name])
    return _DTYPES[name]


def get_precision() -> str:
    dt = torch.get_default_dtype()
    return next(k for k, v in _DTYPES.items() if v == dt)


class precision:
    """Context manager that temporarily switches the default dtype."""

    def __init__(self, name: str):
        self.name = name
        self._prev = None

    def __enter__(self):
        self._prev = get_precision()
        set_precision(self.name)
        return self

    def __exit__(self, *exc):
        set_precision(self._prev)
        return False


def deterministic(seed: int | None = None) -> None:
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


def _expect_rank(x: torch.Tensor, rank: int, name: str) -> None:
    if x.dim() != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {tuple(x.shape)}")


def conv2d(
    x: torch.Tensor,
    w: torch.Tensor,
    b: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> torch.Tensor:
    """2D cross-correlation over ``[B, Cin, H, W]`` with weight ``[Cout, Cin/groups, k, k]``."""
    _expect_rank(x, 4, "conv2d input")
    _expect_rank(w, 4, "conv2d weight")
    bsz, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: Cin={cin} and Cout={cout} must be divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: weight expects Cin/groups={cin_g}, input has Cin={cin}, groups={groups}")
    if kh % 2 == 0 and kh != stride:
        raise ShapeError(f"conv2d: even kernel k={kh} only allowed when stride == k (got stride={stride})")
    if b is not None and tuple(b.shape) != (cout,):
        raise ShapeError(f"conv2d: bias shape {tuple(b.shape)} does not match Cout={cout}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * padding}x{wd + 2 * padding} smaller than kernel {kh}")
    return F.conv2d(x, w, b, stride=stride, padding=padding, groups=groups)


def conv_out_size(n: int, k: int, stride: int = 1, padding: int = 0) -> int:
    return (n + 2 * padding - k) // stride + 1


def layer_norm_channels(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-6
) -> torch.Tensor:
    """Normalise over the channel axis independently at each (b, h, w)."""
    _expect_rank(x, 4, "layer_norm_channels input")
    if eps <= 0:
        raise ValueError(f"layer_norm_channels: eps must be > 0, got {eps}")
    c = x.shape[1]
    if tuple(gamma.shape) != (c,) or tuple(beta.shape) != (c,):
        raise ShapeError(
            f"layer_norm_channels: gamma {tuple(gamma.shape)} / beta {tuple(beta.shape)} do not match C={c}"
        )
    mean = x.mean(dim=1, keepdim=True)
    var = (x - mean).pow(2).mean(dim=1, keepdim=True)
    xhat = (x - mean) / torch.sqrt(var + eps)
    return xhat * gamma.view(1, c, 1, 1) + beta.view(1, c, 1, 1)


def bilinear_upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Bilinear x2 upsampling with half-pixel (align_corners=False) sampling."""
    _expect_rank(x, 4, "bilinear_upsample2x input")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"bilinear_upsample2x: empty spatial dims {tuple(x.shape)}")
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Gradients add up across calls; call ``zero_grad`` between steps.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


class ChannelLayerNorm(nn.Module):
    """Module wrapper for :func:`layer_norm_channels`."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm_channels(x, self.weight, self.bias, self.eps)


# --------------------------------------------------------------------------
# finite-difference oracle


def numeric_grad(
    fn: Callable[[], torch.Tensor],
    target: torch.Tensor,
    h: float = 1e-6,
    indices: Sequence[int] | None = None,
) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. entries of ``target``.

    ``target`` is perturbed in place (and restored). Returns a flat tensor
    holding the estimate at ``indices`` (all entries when ``None``).
    """
    flat = target.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = torch.zeros(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            flat[i] = orig
            out[k] = (fp - fm) / (2 * h)
    return out


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Infinity-norm relative error ``max|a - n| / max|n|``."""
    a = analytic.detach().double().reshape(-1)
    n = numeric.detach().double().reshape(-1)
    scale = max(float(n.abs().max()) if n.numel() else 0.0, 1e-12)
    return float((a - n).abs().max()) / scale if n.numel() else 0.0


def sample_indices(numel: int, k: int, gen: torch.Generator | None = None) -> list[int]:
    if numel <= k:
        return list(range(numel))
    return torch.randperm(numel, generator=gen)[:k].sort().values.tolist()
