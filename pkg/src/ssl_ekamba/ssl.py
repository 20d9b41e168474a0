"""Self-supervised objectives: spatial (autoencoder + spectral k-means) and temporal (InfoNCE)."""

from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import DTYPE


class Fusion(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.ones(d_model, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.ones(d_model, dtype=DTYPE))

    def forward(self, M, M_aug):
        return fuse_embeddings(M, M_aug, self.w1, self.w2)


def fuse_embeddings(M, M_aug, w1, w2):
    if M.shape != M_aug.shape:
        raise ValueError(f"embedding shapes differ: {tuple(M.shape)} vs {tuple(M_aug.shape)}")
    return w1 * M + w2 * M_aug


class AutoEncoder(nn.Module):
    def __init__(self, d_model: int, d_latent: int | None = None):
        super().__init__()
        d_latent = d_latent or max(1, d_model // 2)
        self.enc = nn.Linear(d_model, d_latent, dtype=DTYPE)
        self.dec = nn.Linear(d_latent, d_model, dtype=DTYPE)

    def forward(self, V):
        return autoencode(V, self)


def autoencode(V: torch.Tensor, ae: AutoEncoder):
    """Returns ``(Dlat, V')`` with ``Dlat`` laid out ``(..., d_lat, N)``."""
    z = ae.enc(V)  # (..., N, d_lat)
    return z.transpose(-1, -2), ae.dec(z)


def reconstruction_loss(V, V_rec) -> torch.Tensor:
    """Mean over regions (and any leading axes) of squared row error."""
    return ((V - V_rec) ** 2).sum(-1).mean()


def gram(Dlat: torch.Tensor) -> torch.Tensor:
    return Dlat.transpose(-1, -2) @ Dlat


def update_cluster_indicator(Dlat_or_gram: torch.Tensor, k: int, *, is_gram: bool = False) -> torch.Tensor:
    """Top-``k`` eigenvectors of the region Gram matrix, as a constant ``(N, k)``.

    Columns follow descending eigenvalue (ties: lower eigh index first) and
    each column's largest-magnitude entry is made positive.
    """
    with torch.no_grad():
        G = Dlat_or_gram if is_gram else gram(Dlat_or_gram)
        G = 0.5 * (G + G.T)
        N = G.shape[-1]
        if k > N:
            raise ValueError(f"k={k} clusters exceeds {N} regions")
        vals, vecs = torch.linalg.eigh(G)
        # eigh is ascending; stable sort on -vals keeps index order for ties
        order = sorted(range(N), key=lambda i: -float(vals[i]))[:k]
        F = vecs[:, order].clone()
        for c in range(k):
            j = int(torch.argmax(F[:, c].abs()))
            if F[j, c] < 0:
                F[:, c] = -F[:, c]
    return F.detach()


def kmeans_loss(Dlat: torch.Tensor, F: torch.Tensor) -> torch.Tensor:
    """``Tr(G) - Tr(F^T G F)`` with ``G = Dlat^T Dlat``; averaged over leading axes."""
    G = gram(Dlat)
    tr = torch.diagonal(G, dim1=-2, dim2=-1).sum(-1)
    captured = torch.diagonal(F.T @ G @ F, dim1=-2, dim2=-1).sum(-1)
    return (tr - captured).mean()


class Bilinear(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.W = nn.Parameter(torch.eye(d_model, dtype=DTYPE) + torch.randn(d_model, d_model, dtype=DTYPE) * (0.1 / math.sqrt(d_model)))

    def forward(self, seq, seq_aug):
        return bilinear_scores(seq, seq_aug, self.W)


def bilinear_scores(seq: torch.Tensor, seq_aug: torch.Tensor, W: torch.Tensor):
    """Positive ``z'[..., t, n]`` and all-pairs ``z''[..., t, t', n]`` scores.

    ``seq`` and ``seq_aug`` are ``(..., T, N, D)``. ``z''`` includes the
    diagonal ``t' == t`` (equal to ``z'``); the loss masks it out.
    """
    left = seq @ W  # (..., T, N, D)
    pos = (left * seq_aug).sum(-1)
    allp = torch.einsum("...tnd,...snd->...tsn", left, seq_aug)
    return pos, allp


def temporal_contrastive_loss(pos: torch.Tensor, neg: torch.Tensor, tau: float = 0.5,
                              neg_mask: torch.Tensor | None = None) -> torch.Tensor:
    """InfoNCE averaged over regions, anchor slots and leading axes.

    ``pos`` is ``(..., T, N)``; ``neg`` is ``(..., T, S, N)``. By default the
    diagonal ``S == T`` entries of a square ``neg`` are excluded, matching
    the all-pairs output of :func:`bilinear_scores`. Pass ``neg_mask``
    (``(T, S)`` booleans, True = negative) to override.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    T, S = neg.shape[-3], neg.shape[-2]
    if neg_mask is None:
        if T == S:
            neg_mask = ~torch.eye(T, dtype=torch.bool)
        else:
            neg_mask = torch.ones(T, S, dtype=torch.bool)
    if not bool(neg_mask.any(dim=1).all()):
        raise ValueError("every anchor needs at least one negative")
    z_neg = (neg / tau).masked_fill(~neg_mask.unsqueeze(-1), float("-inf"))
    z_pos = (pos / tau).unsqueeze(-2)
    logits = torch.cat([z_pos, z_neg], dim=-2)
    loss = torch.logsumexp(logits, dim=-2) - pos / tau
    return loss.mean()
