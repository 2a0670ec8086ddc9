import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eagle.cbam import CBAM, cbam_forward
from eagle.checks import grad_check_module
from eagle.core import ShapeError


def test_shape_preserved():
    assert cbam_forward(torch.randn(1, 64, 8, 8), CBAM(64)).shape == (1, 64, 8, 8)


def test_saturated_gates_are_identity():
    block = CBAM(32).double()
    with torch.no_grad():
        block.fc2.weight.zero_()
        block.fc2.bias.fill_(25.0)  # two MLP passes are summed: logit 50
        block.spatial.weight.zero_()
        block.spatial.bias.fill_(50.0)
    x = torch.randn(2, 32, 6, 6, dtype=torch.float64)
    assert torch.equal(block(x), x)


def test_constant_input_gives_constant_spatial_map():
    block = CBAM(16)
    x = torch.randn(2, 16, 1, 1).expand(2, 16, 9, 9).contiguous()
    gate = block.spatial_gate(x * block.channel_gate(x))
    # exact in real arithmetic; float32 conv accumulation order leaves ulp-level noise
    assert torch.allclose(gate, gate[..., :1, :1].expand_as(gate), rtol=0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.01, 20.0))
def test_output_magnitude_bounded_by_input(seed, scale):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 16, 5, 5, generator=g) * scale
    block = CBAM(16, reduction=4)
    assert bool((block(x).abs() <= x.abs()).all())
    for gate in (block.channel_gate(x), block.spatial_gate(x)):
        assert bool(((gate >= 0) & (gate <= 1)).all())


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_gates_strictly_inside_unit_interval(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 16, 5, 5, generator=g, dtype=torch.float64)
    block = CBAM(16, reduction=4).double()
    for gate in (block.channel_gate(x), block.spatial_gate(x)):
        assert bool(((gate > 0) & (gate < 1)).all())


def test_validation():
    with pytest.raises(ValueError):
        CBAM(24, reduction=16)
    with pytest.raises(ValueError):
        CBAM(16, spatial_kernel=4)
    with pytest.raises(ShapeError):
        CBAM(16)(torch.randn(1, 8, 4, 4))


def test_gradient(gen):
    err, where = grad_check_module(CBAM(16, reduction=4, spatial_kernel=3), [torch.randn(2, 16, 4, 4, generator=gen)])
    assert err < 1e-3, where
