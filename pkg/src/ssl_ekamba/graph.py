"""Normalized-adjacency GCN and the stacked spatio-temporal encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .ekan import EkanStack, SplineGrid
from .numerics import DTYPE, relu
from .sssm import EkambaBlock


def normalize_adjacency(adj) -> torch.Tensor:
    """``D^-1/2 (A + I) D^-1/2`` for one ``(N, N)`` or a batch ``(B, N, N)`` of graphs."""
    a = torch.as_tensor(np.asarray(adj) if not torch.is_tensor(adj) else adj, dtype=DTYPE)
    if not torch.equal(a, a.transpose(-1, -2)):
        raise ValueError("adjacency matrix must be symmetric")
    a_tilde = a + torch.eye(a.shape[-1], dtype=DTYPE)
    d = a_tilde.sum(-1).rsqrt()
    return d.unsqueeze(-1) * a_tilde * d.unsqueeze(-2)


class GcnLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        bound = math.sqrt(2.0) * math.sqrt(6.0 / (d_in + d_out))  # ReLU gain
        self.W = nn.Parameter(torch.empty(d_in, d_out, dtype=DTYPE).uniform_(-bound, bound))

    def forward(self, h: torch.Tensor, adj_hat: torch.Tensor) -> torch.Tensor:
        return gcn_layer(h, adj_hat, self.W)


def gcn_layer(h: torch.Tensor, adj_hat: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """``ReLU(A_hat H W)`` with regions on axis -2.

    ``adj_hat`` may carry leading batch axes; they are aligned with the
    leading axis of ``h`` (extra axes of ``h``, e.g. time, broadcast).
    """
    if h.shape[-1] != W.shape[0]:
        raise ValueError(f"feature width {h.shape[-1]} != W rows {W.shape[0]}")
    if h.shape[-2] != adj_hat.shape[-1]:
        raise ValueError(f"{h.shape[-2]} regions but adjacency is {tuple(adj_hat.shape)}")
    if adj_hat.dim() == 3 and h.dim() == 4:
        adj_hat = adj_hat.unsqueeze(1)  # (B, 1, N, N) against (B, T, N, D)
    return relu(adj_hat @ h @ W)


@dataclass
class EncoderOutput:
    M: torch.Tensor  # (B, N, D) region embeddings
    seq: torch.Tensor  # (B, T, N, D) final per-slot embeddings
    first: torch.Tensor  # (B, T, N, D) output of the first temporal block


class StEncoder(nn.Module):
    """Input eKAN, then ``layers`` x (eKamba -> GCN -> eKamba) and a temporal readout."""

    def __init__(self, d_feat: int, d_model: int = 64, layers: int = 2, d_state: int = 16,
                 conv_width: int = 4, ekan_layers: int = 1, grid: SplineGrid | None = None,
                 readout: str = "last"):
        super().__init__()
        if layers < 1:
            raise ValueError("need at least one encoder layer")
        if readout not in ("last", "mean"):
            raise ValueError(f"unknown readout {readout!r}")
        self.d_model = d_model
        self.readout = readout
        self.input_proj = EkanStack([d_feat, d_model], grid)

        def block():
            return EkambaBlock(d_model, d_state, conv_width, ekan_layers, grid)

        self.temporal_in = nn.ModuleList(block() for _ in range(layers))
        self.gcn = nn.ModuleList(GcnLayer(d_model, d_model) for _ in range(layers))
        self.temporal_out = nn.ModuleList(block() for _ in range(layers))

    def set_parallel_scan(self, flag: bool) -> None:
        for blk in [*self.temporal_in, *self.temporal_out]:
            blk.parallel_scan = flag

    def forward(self, x: torch.Tensor, adj_hat: torch.Tensor) -> EncoderOutput:
        return st_encode(x, adj_hat, self)


def st_encode(x: torch.Tensor, adj_hat: torch.Tensor, enc: StEncoder) -> EncoderOutput:
    """Encode windows ``x (B, T, N, d_feat)`` (or unbatched ``(T, N, d_feat)``)."""
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    h = enc.input_proj(x)
    first = None
    for t_in, gcn, t_out in zip(enc.temporal_in, enc.gcn, enc.temporal_out):
        # temporal blocks scan each region's sequence: (B, N, T, D)
        h = t_in(h.transpose(1, 2)).transpose(1, 2)
        if first is None:
            first = h
        h = gcn(h, adj_hat)
        h = t_out(h.transpose(1, 2)).transpose(1, 2)
    M = h[:, -1] if enc.readout == "last" else h.mean(dim=1)
    if unbatched:
        return EncoderOutput(M[0], h[0], first[0])
    return EncoderOutput(M, h, first)
