"""Property suites behind ``eagle check``.

Each suite returns a list of :class:`CheckResult`; the CLI prints one line
per result and exits non-zero if any failed.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from . import core
from .cbam import CBAM
from .cvssb import CVSSB, DAFFN
from .haar import HWTB, haar_forward, haar_inverse
from .losses import bce, combined_loss, dice_loss
from .model import Eagle, EagleConfig, expected_feature_shapes
from .ss2d import SS2D, Ss2dConfig, selective_scan_parallel, selective_scan_seq

SCAN_LENGTHS = (1, 2, 255, 1024)
PRIMITIVE_TOL = 1e-5
LOSS_TOL = 1e-6
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


# --------------------------------------------------------------------------
# haar


def haar_suite(n: int = 100, seed: int = 0) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    worst_rt, worst_energy = 0.0, 0.0
    t0 = time.perf_counter()
    for _ in range(n):
        c = int(torch.randint(1, 9, (1,), generator=gen))
        h = 2 * int(torch.randint(1, 33, (1,), generator=gen))
        w = 2 * int(torch.randint(1, 33, (1,), generator=gen))
        x = torch.randn(c, h, w, generator=gen, dtype=torch.float32)
        bands = haar_forward(x)
        worst_rt = max(worst_rt, float((haar_inverse(bands) - x).abs().max()))
        ex = float(x.double().pow(2).sum())
        eb = sum(float(b.double().pow(2).sum()) for b in bands)
        worst_energy = max(worst_energy, abs(eb - ex) / ex)
    dt = time.perf_counter() - t0
    return [
        CheckResult("haar.round_trip", worst_rt < 1e-6, f"max|inv(fwd(x))-x| = {worst_rt:.2e} over {n} tensors"),
        CheckResult("haar.parseval", worst_energy < 1e-5, f"max relative energy gap = {worst_energy:.2e}"),
        CheckResult("haar.runtime", dt < 10, f"{dt:.2f}s"),
    ]


# --------------------------------------------------------------------------
# scan


def random_scan_inputs(L: int, d: int = 4, n: int = 4, gen: torch.Generator | None = None,
                       dtype=torch.float32):
    """Random but well-conditioned selective-scan arguments."""
    u = torch.randn(d, L, generator=gen, dtype=dtype)
    delta = F.softplus(torch.randn(d, L, generator=gen, dtype=dtype) * 0.5 - 2.0)
    A = -torch.exp(torch.log(torch.arange(1, n + 1, dtype=dtype)).repeat(d, 1)
                   + 0.3 * torch.randn(d, n, generator=gen, dtype=dtype))
    B = torch.randn(n, L, generator=gen, dtype=dtype)
    C = torch.randn(n, L, generator=gen, dtype=dtype)
    D = torch.randn(d, generator=gen, dtype=dtype)
    return u, delta, A, B, C, D


def scan_suite(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    out = []
    t0 = time.perf_counter()
    for L in SCAN_LENGTHS:
        worst = 0.0
        for _ in range(trials):
            args = random_scan_inputs(L, gen=gen)
            worst = max(worst, float((selective_scan_parallel(*args) - selective_scan_seq(*args)).abs().max()))
        out.append(CheckResult(f"scan.parallel_eq_seq[L={L}]", worst < 1e-5, f"max abs diff = {worst:.2e}"))

    # causality: zeroing the future never changes the past
    ok = True
    for L in (8, 255):
        u, delta, A, B, C, D = random_scan_inputs(L, gen=gen)
        y = selective_scan_parallel(u, delta, A, B, C, D)
        for t in (0, L // 3, L - 2):
            if t < 0:
                continue
            u2 = u.clone()
            u2[:, t + 1:] = 0
            y2 = selective_scan_parallel(u2, delta, A, B, C, D)
            ok &= bool(torch.equal(y[:, : t + 1], y2[:, : t + 1]))
    out.append(CheckResult("scan.causality", ok, "prefix outputs unchanged when the suffix is zeroed"))

    # reversal: scanning the reversed sequence == reversing a scan run in the opposite direction
    worst = 0.0
    for L in (7, 64):
        u, delta, A, B, C, D = random_scan_inputs(L, gen=gen)
        rev = lambda t: t.flip(-1)  # noqa: E731
        y_rev = selective_scan_seq(rev(u), rev(delta), A, rev(B), rev(C), D)
        y_bwd = rev(_scan_backward_direction(u, delta, A, B, C, D))
        worst = max(worst, float((y_rev - y_bwd).abs().max()))
    out.append(CheckResult("scan.reversal", worst < 1e-6, f"max abs diff = {worst:.2e}"))
    dt = time.perf_counter() - t0
    out.append(CheckResult("scan.runtime", dt < 30, f"{dt:.2f}s"))
    return out


def _scan_backward_direction(u, delta, A, B, C, D):
    """Right-to-left recurrence written directly (no flips), as an independent reference."""
    L = u.shape[-1]
    h = torch.zeros(u.shape[0], A.shape[-1], dtype=u.dtype)
    ys = [None] * L
    for t in range(L - 1, -1, -1):
        h = torch.exp(delta[:, t, None] * A) * h + (delta[:, t] * u[:, t])[:, None] * B[None, :, t]
        ys[t] = (h * C[None, :, t]).sum(-1) + D * u[:, t]
    return torch.stack(ys, dim=-1)


# --------------------------------------------------------------------------
# gradients


def grad_check_fn(fn: Callable[..., torch.Tensor], inputs: list[torch.Tensor], h: float = 1e-6,
                  max_coords: int = 40, seed: int = 0) -> float:
    """Rel. error of autograd vs central differences for scalar ``fn(*inputs)`` (inputs in float64)."""
    gen = torch.Generator().manual_seed(seed)
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(*leaves), leaves)
    worst = 0.0
    for leaf, g in zip(leaves, grads):
        idx = core.sample_indices(leaf.numel(), max_coords, gen)
        num = core.numeric_grad(lambda: fn(*leaves), leaf, h, idx)
        worst = max(worst, core.rel_error(g.reshape(-1)[idx], num))
    return worst


def grad_check_module(module: torch.nn.Module, inputs: list[torch.Tensor], h: float = 1e-6,
                      max_coords: int = 12, seed: int = 0) -> tuple[float, str]:
    """Analytic gradient of a float32 module vs central differences on a float64 copy.

    The loss is ``sum(out * r)`` for a fixed random ``r``. Every parameter
    tensor and every input is probed on a random subset of entries; the
    result is the worst per-tensor infinity-norm relative error.
    """
    gen = torch.Generator().manual_seed(seed)
    m32 = module.float()
    m64 = copy.deepcopy(module).double()
    x32 = [x.detach().float().requires_grad_(True) for x in inputs]
    x64 = [x.detach().double() for x in inputs]
    with torch.no_grad():
        r = torch.randn(m64(*x64).shape, generator=gen, dtype=torch.float64)

    def loss64():
        return (m64(*x64) * r).sum()

    out32 = m32(*x32)
    m32.zero_grad()
    (out32 * r.float()).sum().backward()

    worst, where = 0.0, ""
    named64 = dict(m64.named_parameters())
    targets = [(f"input{i}", x32[i].grad, x64[i]) for i in range(len(inputs))]
    targets += [(n, p.grad, named64[n].data) for n, p in m32.named_parameters()]
    for name, g, target in targets:
        g = torch.zeros_like(target) if g is None else g
        idx = core.sample_indices(target.numel(), max_coords, gen)
        num = core.numeric_grad(loss64, target, h, idx)
        if float(num.abs().max()) < 1e-9 and float(g.reshape(-1)[idx].abs().max()) < 1e-6:
            continue
        err = core.rel_error(g.reshape(-1)[idx], num)
        if err > worst:
            worst, where = err, name
    return worst, where


def _primitive_checks(gen) -> list[tuple[str, float, float]]:
    d = torch.float64
    x = torch.randn(2, 3, 5, 5, generator=gen, dtype=d)
    w = torch.randn(4, 3, 3, 3, generator=gen, dtype=d)
    b = torch.randn(4, generator=gen, dtype=d)
    wg = torch.randn(6, 1, 3, 3, generator=gen, dtype=d)
    x6 = torch.randn(1, 6, 4, 4, generator=gen, dtype=d)
    gam = torch.randn(3, generator=gen, dtype=d)
    bet = torch.randn(3, generator=gen, dtype=d)
    r_conv = torch.randn(2, 4, 5, 5, generator=gen, dtype=d)
    r3 = torch.randn(2, 3, 5, 5, generator=gen, dtype=d)
    r_up = torch.randn(2, 3, 10, 10, generator=gen, dtype=d)
    v = torch.randn(50, generator=gen, dtype=d)
    v = v + torch.sign(v) * 1e-3  # keep relu away from its kink
    rv = torch.randn(50, generator=gen, dtype=d)
    y = (torch.rand(64, generator=gen, dtype=d) > 0.5).to(d)
    p = torch.rand(64, generator=gen, dtype=d) * 0.9 + 0.05
    return [
        ("conv2d", grad_check_fn(lambda x, w, b: (core.conv2d(x, w, b, padding=1) * r_conv).sum(), [x, w, b]), PRIMITIVE_TOL),
        ("conv2d_grouped_stride2", grad_check_fn(
            lambda x, w: core.conv2d(x, w, None, stride=2, padding=1, groups=6).pow(2).sum(), [x6, wg]), PRIMITIVE_TOL),
        ("layer_norm_channels", grad_check_fn(
            lambda x, g, b: (core.layer_norm_channels(x, g, b, 1e-6) * r3).sum(), [x, gam, bet]), PRIMITIVE_TOL),
        ("bilinear_upsample2x", grad_check_fn(lambda x: (core.bilinear_upsample2x(x) * r_up).sum(), [x]), PRIMITIVE_TOL),
        ("silu", grad_check_fn(lambda v: (core.silu(v) * rv).sum(), [v]), PRIMITIVE_TOL),
        ("relu", grad_check_fn(lambda v: (core.relu(v) * rv).sum(), [v]), PRIMITIVE_TOL),
        ("sigmoid", grad_check_fn(lambda v: (core.sigmoid(v) * rv).sum(), [v]), PRIMITIVE_TOL),
        ("bce", grad_check_fn(lambda p: bce(y, p), [p]), LOSS_TOL),
        ("dice_loss", grad_check_fn(lambda p: dice_loss(y, p), [p]), LOSS_TOL),
        ("combined_loss", grad_check_fn(lambda p: combined_loss(y, p), [p]), LOSS_TOL),
    ]


def _composite_checks(gen) -> list[tuple[str, float, float]]:
    torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
    tiny = Ss2dConfig(d_state=2, expand=2)
    x4 = torch.randn(2, 4, 4, 4, generator=gen)
    x6 = torch.randn(1, 4, 6, 6, generator=gen)
    out = []
    for name, module, inputs in [
        ("ss2d_block", SS2D(4, tiny), [x4]),
        ("ss2d_block[parallel]", SS2D(4, Ss2dConfig(d_state=2, scan="parallel")), [x4]),
        ("daffn", DAFFN(4), [x6]),
        ("cvssb", CVSSB(4, 8, tiny), [x4]),
        ("cbam", CBAM(16, reduction=4, spatial_kernel=3), [torch.randn(2, 16, 4, 4, generator=gen)]),
        ("hwtb", HWTB(4), [x4]),
    ]:
        err, where = grad_check_module(module, inputs)
        out.append((f"{name} (worst: {where})", err, COMPOSITE_TOL))
    return out


def grad_suite(seed: int = 0) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    t0 = time.perf_counter()
    rows = _primitive_checks(gen) + _composite_checks(gen)
    dt = time.perf_counter() - t0
    res = [CheckResult(f"grad.{n}", err < tol, f"rel err {err:.2e} < {tol:g}") for n, err, tol in rows]
    res.append(CheckResult("grad.runtime", dt < 120, f"{dt:.2f}s"))
    return res


# --------------------------------------------------------------------------
# shapes


def shapes_suite(sizes=(64, 128, 256), forward_limit: int = 256) -> list[CheckResult]:
    """Encoder pyramid and output shape of the reference configuration."""
    out = []
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = EagleConfig(channels=(32, 64, 128, 256, 512), depths=(2, 2, 4, 2))
    model = Eagle(cfg).eval()
    out.append(CheckResult("shapes.construct[2,2,4,2]", True, f"{sum(p.numel() for p in model.parameters())} params"))
    for s in sizes:
        if s > forward_limit:
            continue
        t1 = time.perf_counter()
        with torch.no_grad():
            x = torch.rand(1, 1, s, s)
            feats = model.encode(x)
            y = model.decode(feats)
        got = [tuple(f.shape[1:]) for f in feats]
        want = expected_feature_shapes(cfg, s, s)
        out.append(CheckResult(f"shapes.encoder[{s}]", got == want, f"{got}"))
        ok = tuple(y.shape) == (1, 1, s, s) and bool(((y > 0) & (y < 1)).all())
        out.append(CheckResult(f"shapes.output[{s}]", ok, f"{tuple(y.shape)} in (0,1), {time.perf_counter() - t1:.1f}s"))
    for depths in ((3, 3, 3, 3), (2, 2, 5, 2)):
        Eagle(EagleConfig(depths=depths))
        out.append(CheckResult(f"shapes.construct{list(depths)}", True))
    dt = time.perf_counter() - t0
    out.append(CheckResult("shapes.runtime", dt < 60, f"{dt:.2f}s"))
    return out


SUITES = {"haar": haar_suite, "scan": scan_suite, "grad": grad_suite, "shapes": shapes_suite}


def run(name: str) -> list[CheckResult]:
    if name == "all":
        return [r for fn in SUITES.values() for r in fn()]
    return SUITES[name]()
