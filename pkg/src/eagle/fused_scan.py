"""Compiled selective scan with a hand-written backward pass.

Same contract as :func:`eagle.ss2d.selective_scan_seq` (``h0 = 0``), but the
time loop runs in numba and the gradient is the reverse-time adjoint
recurrence instead of an autograd tape. Used by the SS2D block for training.
"""
from __future__ import annotations

import numba
import numpy as np
import torch


@numba.njit(cache=True, fastmath=True)
def _scan_fwd(u, delta, A, B, C, Dv, y, hs):
    # B, C: [G, L, N]; hs: [G, D, L, N]
    G, D, L = u.shape
    N = A.shape[2]
    h = np.empty(N, dtype=u.dtype)
    for g in range(G):
        for d in range(D):
            h[:] = 0.0
            for t in range(L):
                dt = delta[g, d, t]
                du = dt * u[g, d, t]
                acc = Dv[g, d] * u[g, d, t]
                for n in range(N):
                    h[n] = np.exp(dt * A[g, d, n]) * h[n] + du * B[g, t, n]
                    hs[g, d, t, n] = h[n]
                    acc += C[g, t, n] * h[n]
                y[g, d, t] = acc


@numba.njit(cache=True, fastmath=True)
def _scan_bwd(u, delta, A, B, C, Dv, hs, gy, du, ddelta, dA, dB, dC, dD):
    G, D, L = u.shape
    N = A.shape[2]
    carry = np.empty(N, dtype=u.dtype)
    for g in range(G):
        for d in range(D):
            carry[:] = 0.0
            dD[g, d] = 0.0
            for n in range(N):
                dA[g, d, n] = 0.0
            for t in range(L - 1, -1, -1):
                dt = delta[g, d, t]
                ut = u[g, d, t]
                gt = gy[g, d, t]
                dD[g, d] += gt * ut
                s_delta = 0.0
                s_u = Dv[g, d] * gt
                for n in range(N):
                    an = A[g, d, n]
                    a = np.exp(dt * an)
                    lam = carry[n] + C[g, t, n] * gt
                    hprev = hs[g, d, t - 1, n] if t > 0 else 0.0
                    ga = lam * hprev * a
                    s_delta += ga * an + lam * ut * B[g, t, n]
                    dA[g, d, n] += ga * dt
                    s_u += lam * dt * B[g, t, n]
                    dB[g, t, n] += lam * dt * ut
                    dC[g, t, n] += gt * hs[g, d, t, n]
                    carry[n] = a * lam
                ddelta[g, d, t] = s_delta
                du[g, d, t] = s_u


def _np(x: torch.Tensor) -> np.ndarray:
    return x.detach().contiguous().numpy()


class _FusedScan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, delta, A, B, C, Dv):
        un, dn, An, Bn, Cn, Dn = map(_np, (u, delta, A, B, C, Dv))
        G, D, L = un.shape
        y = np.empty_like(un)
        hs = np.empty((G, D, L, An.shape[2]), dtype=un.dtype)
        _scan_fwd(un, dn, An, Bn, Cn, Dn, y, hs)
        ctx.arrays = (un, dn, An, Bn, Cn, Dn, hs)
        return torch.from_numpy(y)

    @staticmethod
    def backward(ctx, gy):
        un, dn, An, Bn, Cn, Dn, hs = ctx.arrays
        gyn = _np(gy)
        du = np.empty_like(un)
        ddelta = np.empty_like(dn)
        dA = np.empty_like(An)
        dB = np.zeros_like(Bn)
        dC = np.zeros_like(Cn)
        dD = np.empty_like(Dn)
        _scan_bwd(un, dn, An, Bn, Cn, Dn, hs, gyn, du, ddelta, dA, dB, dC, dD)
        return tuple(torch.from_numpy(g) for g in (du, ddelta, dA, dB, dC, dD))


def selective_scan_fused(u, delta, A, B, C, D=None):
    """Shapes as in ``selective_scan_seq``; leading dims of A/B/C/D broadcast against ``u``."""
    from .ss2d import _discretize_checks

    _discretize_checks(u, delta, A, B)
    batch = u.shape[:-2]
    Dn, L = u.shape[-2:]
    N = A.shape[-1]
    if D is None:
        D = u.new_zeros(Dn)
    g = int(np.prod(batch)) if batch else 1
    y = _FusedScan.apply(
        u.reshape(g, Dn, L),
        delta.reshape(g, Dn, L),
        A.expand(*batch, Dn, N).reshape(g, Dn, N),
        B.expand(*batch, N, L).reshape(g, N, L).transpose(1, 2),
        C.expand(*batch, N, L).reshape(g, N, L).transpose(1, 2),
        D.expand(*batch, Dn).reshape(g, Dn),
    )
    return y.reshape(*batch, Dn, L)
