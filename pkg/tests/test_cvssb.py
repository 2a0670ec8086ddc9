from fractions import Fraction

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from eagle.checks import grad_check_module
from eagle.core import ShapeError, silu
from eagle.cvssb import (CVSSB, DAFFN, ChannelAttention, CVSSBGroup, CvssbConfig, channel_attention, cvssb_forward,
                         cvssb_group, daffn_forward)
from eagle.ss2d import Ss2dConfig

TINY = Ss2dConfig(d_state=2)
D64 = torch.float64


def _saturate(ca: ChannelAttention):
    with torch.no_grad():
        ca.fc2.weight.zero_()
        ca.fc2.bias.fill_(50.0)


def test_channel_attention_saturated_is_identity():
    ca = ChannelAttention(8).double()
    _saturate(ca)
    x = torch.randn(2, 8, 5, 5, dtype=D64)
    assert torch.equal(channel_attention(x, ca), x)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 5.0))
def test_channel_attention_weights_open_interval(seed, scale):
    g = torch.Generator().manual_seed(seed)
    ca = ChannelAttention(8)
    x = torch.randn(2, 8, 4, 4, generator=g) * scale
    w = ca.weights(x)
    assert w.shape == (2, 8, 1, 1)
    assert bool(((w > 0) & (w < 1)).all())
    assert ca(x).shape == x.shape


def test_daffn_widths():
    ffn = DAFFN(8)
    assert ffn.proj_in.out_channels == 32
    chunks = ffn.branches(torch.randn(1, 8, 6, 6))
    assert [c.shape[1] for c in chunks] == [8, 8, 8, 8]
    assert [m.kernel_size[0] for m in (ffn.dw1, ffn.dw3, ffn.dw5, ffn.conv4)] == [1, 3, 5, 3]
    assert [m.groups for m in (ffn.dw1, ffn.dw3, ffn.dw5, ffn.conv4)] == [8, 8, 8, 1]
    assert daffn_forward(torch.randn(2, 8, 6, 6), ffn).shape == (2, 16, 6, 6)


def test_daffn_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        DAFFN(4)(torch.randn(1, 3, 4, 4))


def test_daffn_delta_kernels_reduce_to_projection_composition(gen):
    c = 2
    ffn = DAFFN(c).double()
    with torch.no_grad():
        for conv in (ffn.dw1, ffn.dw3, ffn.dw5):
            conv.weight.zero_()
            k = conv.kernel_size[0] // 2
            conv.weight[:, 0, k, k] = 1.0
            conv.bias.zero_()
        ffn.conv4.weight.zero_()
        ffn.conv4.weight[:, :, 1, 1] = torch.eye(c, dtype=D64)
        ffn.conv4.bias.zero_()
    _saturate(ffn.ca)
    x = torch.randn(3, c, 5, 5, generator=gen, dtype=D64)
    w_in, b_in = ffn.proj_in.weight[:, :, 0, 0], ffn.proj_in.bias
    w_out, b_out = ffn.proj_out.weight[:, :, 0, 0], ffn.proj_out.bias
    hidden = torch.einsum("oc,bchw->bohw", w_in, silu(x)) + b_in.view(1, -1, 1, 1)
    want = torch.einsum("oc,bchw->bohw", w_out, hidden) + b_out.view(1, -1, 1, 1)
    assert torch.allclose(ffn(x), want, atol=1e-12)


def test_daffn_gradient(gen):
    err, where = grad_check_module(DAFFN(4), [torch.randn(1, 4, 6, 6, generator=gen)])
    assert err < 1e-3, where


@pytest.mark.parametrize("p,j,first,want", [(32, 2, True, 64), (64, 1, True, 64), (64, Fraction(1, 2), True, 32),
                                            (64, 2, False, 64)])
def test_channel_rule(p, j, first, want):
    assert CvssbConfig(p, Fraction(j), first).out_ch == want


def test_channel_rule_rejects_fractional_width():
    with pytest.raises(ValueError):
        CvssbConfig(5, Fraction(1, 2)).out_ch


def test_cvssb_shapes():
    x = torch.randn(1, 32, 8, 8)
    assert CVSSB.from_config(CvssbConfig(32, Fraction(2), ss2d=TINY))(x).shape == (1, 64, 8, 8)
    assert cvssb_forward(torch.randn(1, 64, 8, 8), CVSSB(64, 64, TINY)).shape == (1, 64, 8, 8)


def test_cvssb_rejects_wrong_input():
    with pytest.raises(ShapeError):
        CVSSB(8, 8, TINY)(torch.randn(1, 4, 4, 4))


def test_cvssb_residual_identity(gen):
    block = CVSSB(6, 6, TINY).double()
    with torch.no_grad():
        block.ss2d.out_proj.weight.zero_()
        block.ffn.proj_out.weight.zero_()
        block.ffn.proj_out.bias.zero_()
        block.conv.weight.copy_(torch.eye(6, dtype=D64).view(6, 6, 1, 1))
        block.conv.bias.zero_()
    x = torch.randn(2, 6, 5, 5, generator=gen, dtype=D64)
    assert torch.equal(block(x), x)


def test_cvssb_matches_equation(gen):
    block = CVSSB(4, 8, TINY).double()
    x = torch.randn(1, 4, 6, 6, generator=gen, dtype=D64)
    z1 = x + block.ss2d(block.norm1(x))
    want = F.conv2d(z1, block.conv.weight, block.conv.bias) + block.ffn(block.norm2(z1))
    assert torch.allclose(block(x), want, atol=1e-12)


def test_cvssb_gradient(gen):
    err, where = grad_check_module(CVSSB(4, 8, TINY), [torch.randn(2, 4, 4, 4, generator=gen)])
    assert err < 1e-3, where


def test_group_channel_rule_and_depth():
    g2 = CVSSBGroup(32, 2, 2, TINY)
    g4 = CVSSBGroup(32, 2, 4, TINY)
    x = torch.randn(1, 32, 8, 8)
    assert cvssb_group(x, g2).shape == cvssb_group(x, g4).shape == (1, 64, 8, 8)
    assert [b.in_ch for b in g4] == [32, 64, 64, 64]
    up = CVSSBGroup(64, Fraction(1, 2), 3, TINY)
    assert up.out_ch == 32 and all(b.out_ch == 32 for b in up)


def test_group_depth_one_equals_block():
    g = CVSSBGroup(8, 2, 1, TINY)
    x = torch.randn(1, 8, 4, 4)
    assert torch.equal(g(x), g[0](x))


def test_group_depth_zero_rejected():
    with pytest.raises(ValueError):
        CVSSBGroup(8, 2, 0, TINY)


@settings(max_examples=8, deadline=None)
@given(h=st.integers(2, 9), w=st.integers(2, 9))
def test_cvssb_preserves_spatial_dims(h, w):
    assert CVSSB(4, 8, TINY)(torch.randn(1, 4, h, w)).shape == (1, 8, h, w)
