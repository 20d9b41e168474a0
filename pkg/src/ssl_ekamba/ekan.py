"""Efficient Kolmogorov-Arnold layers.

Each input coordinate is expanded once into ``K`` B-spline basis values;
the expansion is shared by every output unit, so the spline branch is a
single ``(batch, d_in*K) @ (d_in*K, d_out)`` product. A SiLU base branch
is added on top::

    phi(x) = W_base @ silu(x) + W_spline @ e(x) + b
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .numerics import DTYPE, silu


@dataclass(frozen=True)
class SplineGrid:
    degree: int = 3
    num_basis: int = 8
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.num_basis < self.degree + 1:
            raise ValueError(f"num_basis={self.num_basis} < degree + 1 = {self.degree + 1}")

    @property
    def intervals(self) -> int:
        return self.num_basis - self.degree

    def knots(self) -> torch.Tensor:
        """Uniform knots on [lo, hi] extended by ``degree`` knots each side."""
        h = (self.hi - self.lo) / self.intervals
        j = torch.arange(-self.degree, self.intervals + self.degree + 1, dtype=DTYPE)
        return self.lo + j * h


def cox_de_boor(x: torch.Tensor, grid: SplineGrid) -> torch.Tensor:
    """Full-knot-vector Cox-de Boor recursion, shape ``x.shape + (K,)``.

    Reference path: evaluates every basis over every knot interval.
    Inputs are clamped to ``[lo, hi]``; the right endpoint belongs to the
    last in-domain interval so the basis sums to one on the closed domain.
    """
    t = grid.knots().to(x.device)
    p = grid.degree
    x = torch.clamp(x, grid.lo, grid.hi).unsqueeze(-1)
    bases = ((x >= t[:-1]) & (x < t[1:])).to(DTYPE)
    at_end = x[..., 0] == grid.hi
    bases[at_end] = 0.0
    bases[..., p + grid.intervals - 1][at_end] = 1.0
    for k in range(1, p + 1):
        left = (x - t[: -(k + 1)]) / (t[k:-1] - t[: -(k + 1)]) * bases[..., :-1]
        right = (t[k + 1 :] - x) / (t[k + 1 :] - t[1:-k]) * bases[..., 1:]
        bases = left + right
    return bases


def bspline_basis(x: torch.Tensor, grid: SplineGrid) -> torch.Tensor:
    """B-spline basis values, shape ``x.shape + (K,)``.

    Uses the uniform-knot form of the Cox-de Boor recursion restricted to
    the ``degree + 1`` bases that are nonzero on the interval containing
    ``x``: with local coordinate ``s`` in [0, 1],

        v[k][r] = (s + k - r)/k * v[k-1][r-1] + (r + 1 - s)/k * v[k-1][r]

    and ``v[p][r]`` is the value of basis ``i + r`` for interval ``i``.
    Agrees with :func:`cox_de_boor` to rounding.
    """
    p, G = grid.degree, grid.intervals
    h = (grid.hi - grid.lo) / G
    u = (torch.clamp(x, grid.lo, grid.hi) - grid.lo) / h
    i = torch.clamp(torch.floor(u.detach()), 0, G - 1)
    s = u - i
    vals = [torch.ones_like(s)]
    for k in range(1, p + 1):
        nxt = []
        for r in range(k + 1):
            term = 0
            if r >= 1:
                term = (s + (k - r)) / k * vals[r - 1]
            if r < k:
                term = term + ((r + 1) - s) / k * vals[r]
            nxt.append(term)
        vals = nxt
    local = torch.stack(vals, dim=-1)
    idx = i.long().unsqueeze(-1) + torch.arange(p + 1, device=x.device)
    out = torch.zeros(*x.shape, grid.num_basis, dtype=DTYPE, device=x.device)
    return out.scatter(-1, idx, local)


class EkanLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, grid: SplineGrid | None = None,
                 spline_scale: float = 0.1, base_gain: float = 2.0):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.grid = grid or SplineGrid()
        K = self.grid.num_basis
        # silu has slope 1/2 at the origin; gain 2 keeps small signals from shrinking
        bound = base_gain * math.sqrt(3.0 / d_in)
        self.W_base = nn.Parameter(torch.empty(d_out, d_in, dtype=DTYPE).uniform_(-bound, bound))
        self.W_spline = nn.Parameter(
            torch.randn(d_out, d_in * K, dtype=DTYPE) * (spline_scale / math.sqrt(d_in))
        )
        self.b = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def expand(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated per-input basis expansion, ``(..., d_in*K)``."""
        e = bspline_basis(x, self.grid)
        return e.reshape(*x.shape[:-1], self.d_in * self.grid.num_basis)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ekan_layer_forward(x, self)


def ekan_layer_forward(x: torch.Tensor, layer: EkanLayer) -> torch.Tensor:
    if x.shape[-1] != layer.d_in:
        raise ValueError(f"input width {x.shape[-1]} != layer d_in {layer.d_in}")
    return silu(x) @ layer.W_base.T + layer.expand(x) @ layer.W_spline.T + layer.b


class EkanStack(nn.Module):
    """Composition ``phi_L o ... o phi_0``."""

    def __init__(self, dims: Sequence[int], grid: SplineGrid | None = None):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("need at least an input and an output width")
        self.layers = nn.ModuleList(EkanLayer(a, b, grid) for a, b in zip(dims[:-1], dims[1:]))

    @classmethod
    def from_layers(cls, layers: Sequence[EkanLayer]) -> "EkanStack":
        for a, b in zip(layers[:-1], layers[1:]):
            if a.d_out != b.d_in:
                raise ValueError(f"layer widths do not chain: {a.d_out} -> {b.d_in}")
        stack = cls.__new__(cls)
        nn.Module.__init__(stack)
        stack.layers = nn.ModuleList(layers)
        return stack

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ekan_forward(x, self)


def ekan_forward(x: torch.Tensor, stack: EkanStack) -> torch.Tensor:
    for layer in stack.layers:
        x = ekan_layer_forward(x, layer)
    return x
