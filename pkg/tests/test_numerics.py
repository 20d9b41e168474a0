import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssl_ekamba.numerics import DTYPE, NonFiniteError, grad_check, silu, softmax, softplus, tensor


def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        tensor([1.0, float("nan")])
    assert tensor([1.0, float("inf")], checked=False).shape == (2,)
    assert tensor([1, 2]).dtype == torch.float64


def test_silu_examples():
    assert silu(tensor(0.0)).item() == 0.0
    assert silu(tensor(50.0)).item() == pytest.approx(50.0, abs=1e-12)
    # 1 / (1 + e^-1)
    assert silu(tensor(1.0)).item() == pytest.approx(0.7311, abs=1e-4)


def test_silu_lower_bound_and_monotone():
    x = torch.linspace(-20, 20, 400001, dtype=DTYPE)
    y = silu(x)
    assert y.min().item() >= -0.2785
    pos = y[x >= 0]
    assert bool((pos[1:] >= pos[:-1]).all())


def test_softmax_examples():
    assert torch.allclose(softmax(torch.full((5,), 3.0, dtype=DTYPE)), torch.full((5,), 0.2, dtype=DTYPE))
    out = softmax(tensor([0.0, math.log(3.0)]))
    assert out.tolist() == pytest.approx([0.25, 0.75], abs=1e-15)
    with pytest.raises(ValueError):
        softmax(torch.zeros(0, dtype=DTYPE))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-100, 100))
def test_softmax_shift_invariance(v, c):
    v = tensor(v)
    assert torch.allclose(softmax(v + c), softmax(v), atol=1e-12, rtol=0)


def test_softmax_probability_vectors(gen):
    v = torch.randn(10_000, 7, generator=gen, dtype=DTYPE) * 10
    p = softmax(v)
    assert bool((p > 0).all())
    assert (p.sum(-1) - 1).abs().max().item() < 1e-12


def test_softplus_matches_log1p_exp():
    x = torch.linspace(-30, 30, 601, dtype=DTYPE)
    assert torch.allclose(softplus(x), torch.log1p(torch.exp(x)), atol=1e-14)
    assert softplus(tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)
    assert torch.isfinite(softplus(tensor(1e4)))


def test_grad_check_quadratic():
    w = torch.tensor([3.0], dtype=DTYPE, requires_grad=True)
    assert grad_check(lambda: (w**2).sum(), [w], eps=1e-5) < 1e-8


def test_grad_check_constant():
    w = torch.tensor([1.0, 2.0], dtype=DTYPE, requires_grad=True)
    assert grad_check(lambda: torch.tensor(4.0, dtype=DTYPE) + 0 * w.sum(), [w]) == 0.0


def test_grad_check_detects_wrong_gradient():
    w = torch.tensor([0.7, -1.3], dtype=DTYPE, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x**3).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x  # should be 3 x^2

    assert grad_check(lambda: Wrong.apply(w), [w]) > 0.1


def test_grad_check_rejects_bad_eps_and_nonfinite():
    w = torch.tensor([1.0], dtype=DTYPE, requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: w.sum(), [w], eps=1e-2)
    with pytest.raises(NonFiniteError):
        grad_check(lambda: w.sum() * float("nan"), [w])
