import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eagle.checks import grad_check_module
from eagle.core import ShapeError, relu
from eagle.haar import HWTB, SubBands, haar_forward, haar_inverse, haar_pack, hwtb_forward


def test_constant_block():
    s = haar_forward(torch.ones(1, 2, 2))
    assert [float(b) for b in s] == [2.0, 0.0, 0.0, 0.0]


def test_identity_block():
    s = haar_forward(torch.tensor([[[1.0, 0.0], [0.0, 1.0]]]))
    assert [float(b) for b in s] == [1.0, 0.0, 0.0, 1.0]


def test_inverse_examples():
    z = torch.zeros(3, 2, 2)
    assert torch.equal(haar_inverse(SubBands(z, z, z, z)), torch.zeros(3, 4, 4))
    one = torch.zeros(1, 1, 1)
    assert torch.equal(haar_inverse(SubBands(one + 2, one, one, one)), torch.ones(1, 2, 2))


def test_energy_8x8(gen):
    x = torch.randn(1, 8, 8, generator=gen, dtype=torch.float64)
    assert abs(float(haar_forward(x).energy()) - float(x.pow(2).sum())) < 1e-6


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 8), h=st.integers(1, 32), w=st.integers(1, 32), seed=st.integers(0, 2**16))
def test_round_trip_and_parseval(c, h, w, seed):
    x = torch.randn(c, 2 * h, 2 * w, generator=torch.Generator().manual_seed(seed))
    s = haar_forward(x)
    assert all(b.shape == (c, h, w) for b in s)
    assert float((haar_inverse(s) - x).abs().max()) < 1e-6
    e = float(x.double().pow(2).sum())
    assert abs(sum(float(b.double().pow(2).sum()) for b in s) - e) <= 1e-5 * e


def test_odd_dims_rejected():
    with pytest.raises(ShapeError):
        haar_forward(torch.randn(2, 5, 4))


def test_pack_order():
    x = torch.randn(2, 3, 4, 4)
    s = haar_forward(x)
    assert torch.equal(haar_pack(x), torch.cat(list(s), dim=1))


def test_hwtb_shape_and_range():
    block = HWTB(32)
    y = hwtb_forward(torch.randn(32, 64, 64), block, "train")
    assert y.shape == (32, 32, 32)
    assert bool((y >= 0).all())
    y_eval = hwtb_forward(torch.randn(32, 64, 64), block, "eval")
    assert y_eval.shape == (32, 32, 32) and bool((y_eval >= 0).all())


def test_hwtb_low_band_selection():
    c = 3
    block = HWTB(c)
    block.use_bn = False
    with torch.no_grad():
        block.proj.weight.zero_()
        block.proj.weight[:, :c, 0, 0] = torch.eye(c)
        block.proj.bias.zero_()
    x = torch.randn(c, 8, 8)
    assert torch.allclose(hwtb_forward(x, block), relu(haar_forward(x).low), atol=1e-6)


def test_hwtb_channel_mismatch():
    with pytest.raises(ShapeError):
        HWTB(4)(torch.randn(1, 3, 8, 8))


def test_hwtb_bad_mode():
    with pytest.raises(ValueError):
        hwtb_forward(torch.randn(2, 4, 4), HWTB(2), "inference")


def test_hwtb_grad(gen):
    err, where = grad_check_module(HWTB(4), [torch.randn(2, 4, 4, 4, generator=gen)])
    assert err < 1e-3, where
