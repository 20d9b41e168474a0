import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssl_ekamba.bench import naive_kan_forward
from ssl_ekamba.ekan import (EkanLayer, EkanStack, SplineGrid, bspline_basis, cox_de_boor,
                             ekan_forward, ekan_layer_forward)
from ssl_ekamba.numerics import DTYPE, grad_check, silu


def test_degree_zero_indicator():
    g = SplineGrid(degree=0, num_basis=2)
    assert g.knots().tolist() == [-1.0, 0.0, 1.0]
    for fn in (bspline_basis, cox_de_boor):
        assert fn(torch.tensor([-0.5], dtype=DTYPE), g)[0].tolist() == [1.0, 0.0]
        assert fn(torch.tensor([0.5], dtype=DTYPE), g)[0].tolist() == [0.0, 1.0]


def test_grid_validation():
    with pytest.raises(ValueError):
        SplineGrid(degree=3, num_basis=3)
    with pytest.raises(ValueError):
        SplineGrid(degree=-1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 4), st.integers(0, 6), st.lists(st.floats(-1, 1), min_size=1, max_size=30))
def test_partition_of_unity(degree, extra, xs):
    g = SplineGrid(degree, degree + 1 + extra)
    b = bspline_basis(torch.tensor(xs, dtype=DTYPE), g)
    assert (b.sum(-1) - 1).abs().max().item() < 1e-10
    assert bool((b >= -1e-15).all())


def test_fast_basis_matches_reference():
    x = torch.cat([torch.linspace(-1.3, 1.3, 2001, dtype=DTYPE),
                   torch.tensor([-1.0, 0.0, 1.0, 0.25, -0.75], dtype=DTYPE)])
    for degree, K in [(0, 1), (1, 4), (2, 5), (3, 8), (3, 4), (4, 9)]:
        g = SplineGrid(degree, K)
        assert torch.allclose(bspline_basis(x, g), cox_de_boor(x, g), atol=1e-13, rtol=0)


def test_cubic_central_knot_value():
    # two intervals: knot 0 is interior; the basis centered there is the cardinal cubic, 4/6
    g = SplineGrid(3, 5)
    b = cox_de_boor(torch.tensor([0.0], dtype=DTYPE), g)[0]
    assert b.max().item() == pytest.approx(0.6667, abs=1e-3)
    assert b.tolist() == pytest.approx([0, 1 / 6, 4 / 6, 1 / 6, 0], abs=1e-15)


def test_clamping():
    g = SplineGrid()
    a = bspline_basis(torch.tensor([5.0, -5.0], dtype=DTYPE), g)
    b = bspline_basis(torch.tensor([1.0, -1.0], dtype=DTYPE), g)
    assert torch.equal(a, b)


def _layer(d_in, d_out, grid=None, seed=0):
    torch.manual_seed(seed)
    return EkanLayer(d_in, d_out, grid)


def test_spline_off_is_silu(gen):
    layer = _layer(3, 3)
    with torch.no_grad():
        layer.W_spline.zero_()
        layer.W_base.copy_(torch.eye(3, dtype=DTYPE))
    x = torch.randn(5, 3, generator=gen, dtype=DTYPE)
    assert torch.equal(ekan_layer_forward(x, layer), silu(x))


def test_zero_input_spline_only():
    layer = _layer(2, 3)
    x = torch.zeros(1, 2, dtype=DTYPE)
    expect = layer.expand(x) @ layer.W_spline.T
    assert torch.allclose(ekan_layer_forward(x, layer), expect, atol=0, rtol=0)


def test_hand_degree_zero_layer():
    layer = _layer(1, 1, SplineGrid(0, 2))
    with torch.no_grad():
        layer.W_spline.copy_(torch.tensor([[2.0, 5.0]]))
        layer.W_base.zero_()
        layer.b.fill_(1.0)
    assert ekan_layer_forward(torch.tensor([[0.5]], dtype=DTYPE), layer).item() == 6.0


def test_width_mismatch():
    with pytest.raises(ValueError):
        ekan_layer_forward(torch.zeros(2, 4, dtype=DTYPE), _layer(3, 2))
    with pytest.raises(ValueError):
        EkanStack.from_layers([_layer(3, 2), _layer(3, 2)])


def test_stack_composition(gen):
    a, b = _layer(4, 3, seed=1), _layer(3, 2, seed=2)
    x = torch.randn(6, 4, generator=gen, dtype=DTYPE)
    assert torch.equal(ekan_forward(x, EkanStack.from_layers([a])), ekan_layer_forward(x, a))
    stack = EkanStack.from_layers([a, b])
    assert torch.equal(ekan_forward(x, stack), ekan_layer_forward(ekan_layer_forward(x, a), b))
    assert (stack.d_in, stack.d_out) == (4, 2)


def test_matches_per_edge_oracle(gen):
    torch.manual_seed(5)
    stack = EkanStack([5, 7, 6, 3])
    with torch.no_grad():
        for layer in stack.layers:
            layer.W_spline.mul_(10)
            layer.b.normal_()
    x = torch.randn(4, 5, generator=gen, dtype=DTYPE)
    assert (ekan_forward(x, stack) - naive_kan_forward(x, stack, group=2)).abs().max() < 1e-10


def test_gradients(gen):
    torch.manual_seed(3)
    stack = EkanStack([3, 4, 2])
    x = torch.randn(5, 3, generator=gen, dtype=DTYPE) * 0.6
    params = list(stack.parameters())
    assert grad_check(lambda: (ekan_forward(x, stack) ** 2).sum(), params) < 1e-6


def test_input_gradient_through_basis(gen):
    layer = _layer(2, 2)
    x = (torch.rand(6, 2, generator=gen, dtype=DTYPE) * 1.8 - 0.9).requires_grad_(True)
    assert grad_check(lambda: ekan_layer_forward(x, layer).pow(2).sum(), [x]) < 1e-6
