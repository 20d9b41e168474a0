"""eKamba temporal block: causal depthwise conv, selective scan, SiLU gating, eKAN.

Sequences are ``(..., T, d_model)``; leading axes are batch-like and are
scanned independently. The selective SSM uses a diagonal ``A`` with
zero-order-hold ``A_bar = exp(delta * A)`` and Euler ``B_bar = delta * B``::

    h_t = A_bar_t * h_{t-1} + delta_t * B_t * u_t
    y_t = <C_t, h_t> + D * u_t
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .ekan import EkanStack, SplineGrid
from .numerics import DTYPE, silu, softplus


class CausalConv1d(nn.Module):
    """Depthwise conv with left zero padding; tap ``width-1`` is the newest."""

    def __init__(self, d_model: int, width: int = 4):
        super().__init__()
        self.width = width
        bound = 1.0 / math.sqrt(width)
        self.weight = nn.Parameter(torch.empty(d_model, width, dtype=DTYPE).uniform_(-bound, bound))

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        return causal_conv1d(seq, self.weight)


def causal_conv1d(seq: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    T = seq.shape[-2]
    w = weight.shape[-1]
    padded = torch.nn.functional.pad(seq, (0, 0, w - 1, 0))
    out = torch.zeros_like(seq)
    for j in range(w):
        # tap j sees the input shifted by (w-1-j) steps into the past
        out = out + padded[..., j : j + T, :] * weight[:, j]
    return out


class SelectiveSSM(nn.Module):
    def __init__(self, d_model: int, d_state: int = 16, dt_min: float = 0.01, dt_max: float = 0.1):
        super().__init__()
        self.d_model, self.d_state = d_model, d_state
        s = 1.0 / math.sqrt(d_model)
        self.A = nn.Parameter(-torch.arange(1, d_state + 1, dtype=DTYPE).repeat(d_model, 1))
        self.W_delta = nn.Parameter(torch.randn(d_model, d_model, dtype=DTYPE) * 0.1 * s)
        # inverse softplus of step sizes log-uniform in [dt_min, dt_max]
        dt = torch.exp(torch.rand(d_model, dtype=DTYPE) * (math.log(dt_max) - math.log(dt_min))
                       + math.log(dt_min))
        self.b_delta = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))
        self.W_B = nn.Parameter(torch.randn(d_model, d_state, dtype=DTYPE) * s)
        self.W_C = nn.Parameter(torch.randn(d_model, d_state, dtype=DTYPE) * s)
        self.D = nn.Parameter(torch.ones(d_model, dtype=DTYPE))

    def forward(self, u: torch.Tensor, parallel: bool = False) -> torch.Tensor:
        delta, B, C = ssm_projections(u, self)
        scan = ssm_scan_parallel if parallel else ssm_scan
        return scan(u, delta, B, C, self.A, self.D)


def ssm_projections(u: torch.Tensor, p: SelectiveSSM):
    """Input-dependent step ``delta`` (positive), and ``B``, ``C`` projections."""
    delta = softplus(u @ p.W_delta + p.b_delta)
    return delta, u @ p.W_B, u @ p.W_C


def _discretize(u, delta, B, A):
    # (..., T, d_model, d_state)
    a_bar = torch.exp(delta.unsqueeze(-1) * A)
    bu = (delta * u).unsqueeze(-1) * B.unsqueeze(-2)
    return a_bar, bu


def ssm_scan(u, delta, B, C, A, D) -> torch.Tensor:
    """Sequential reference scan with ``h_0 = 0``."""
    a_bar, bu = _discretize(u, delta, B, A)
    T = u.shape[-2]
    h = torch.zeros_like(bu[..., 0, :, :])
    ys = []
    for t in range(T):
        h = a_bar[..., t, :, :] * h + bu[..., t, :, :]
        ys.append((h * C[..., t, None, :]).sum(-1))
    return torch.stack(ys, dim=-2) + D * u


def ssm_scan_parallel(u, delta, B, C, A, D) -> torch.Tensor:
    """Log-depth (Hillis-Steele) scan over ``(a, b)`` pairs.

    Combining ``(a1, b1)`` then ``(a2, b2)`` gives ``(a1*a2, a2*b1 + b2)``.
    """
    a, b = _discretize(u, delta, B, A)
    T = u.shape[-2]
    step = 1
    while step < T:
        a_prev = torch.cat([torch.ones_like(a[..., :step, :, :]), a[..., :-step, :, :]], dim=-3)
        b_prev = torch.cat([torch.zeros_like(b[..., :step, :, :]), b[..., :-step, :, :]], dim=-3)
        b = a * b_prev + b
        a = a * a_prev
        step *= 2
    return (b * C.unsqueeze(-2)).sum(-1) + D * u


class EkambaBlock(nn.Module):
    """``eKAN(silu(SSM(conv(H'))) + silu(H'))`` applied per time step for the eKAN."""

    def __init__(self, d_model: int = 64, d_state: int = 16, conv_width: int = 4,
                 ekan_layers: int = 1, grid: SplineGrid | None = None,
                 proj: nn.Module | None = None):
        super().__init__()
        self.d_model = d_model
        self.conv = CausalConv1d(d_model, conv_width)
        self.ssm = SelectiveSSM(d_model, d_state)
        # proj can be swapped (naive KAN, plain linear) for benchmarking
        self.proj = proj if proj is not None else EkanStack([d_model] * (ekan_layers + 1), grid)
        self.parallel_scan = False

    def mix(self, h: torch.Tensor) -> torch.Tensor:
        """The gated pre-projection value."""
        return silu(self.ssm(self.conv(h), parallel=self.parallel_scan)) + silu(h)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.proj(self.mix(h))


def ekamba_block(h: torch.Tensor, block: EkambaBlock) -> torch.Tensor:
    return block(h)
