import numpy as np
import pytest
import torch

from ssl_ekamba.numerics import DTYPE


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(gen, *shape, scale=1.0, requires_grad=False):
    t = torch.randn(*shape, generator=gen, dtype=DTYPE) * scale
    return t.requires_grad_(requires_grad)
