"""Heterogeneity scores and the two adaptive augmentations.

Both augmentations are pure functions of their inputs and an integer seed;
all randomness comes from :class:`ssl_ekamba.prng.SplitMix64`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE
from .prng import SplitMix64


@dataclass(frozen=True)
class AugmentConfig:
    feature_rate: float = 0.2
    graph_rate: float = 0.5
    scale: float = 1.0  # injected risk = scale * risk-channel std

    def __post_init__(self):
        for name in ("feature_rate", "graph_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


class Discrepancy(nn.Module):
    """Learnable direction ``w_0`` scoring regions against the city-wide pattern."""

    def __init__(self, d_model: int):
        super().__init__()
        self.w0 = nn.Parameter(torch.randn(d_model, dtype=DTYPE) / math.sqrt(d_model))

    def forward(self, C: torch.Tensor) -> torch.Tensor:
        return local_global_scores(C, self.w0)


def local_global_scores(C: torch.Tensor, w0: torch.Tensor) -> torch.Tensor:
    """``q[..., t, n] = <c_{t,n}, w0>``."""
    return C @ w0


def temporal_aggregate(q: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    """``p_n = sum_t q_{t,n} c_{t,n}``; time is axis -3 of ``C``."""
    return (q.unsqueeze(-1) * C).sum(dim=-3)


def pearson_matrix(s) -> tuple[np.ndarray, np.ndarray]:
    """Region-by-region Pearson correlation of the columns of ``s (T, N)``.

    Returns ``(o, degenerate)``; pairs involving a constant series get
    ``o = 0`` and ``degenerate = True`` (including their diagonal entry).
    """
    s = np.asarray(s.detach() if torch.is_tensor(s) else s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ValueError("need a (T, N) series with T >= 2")
    centered = s - s.mean(axis=0)
    ss = (centered**2).sum(axis=0)
    const = ss <= 1e-300
    cov = centered.T @ centered
    denom = np.sqrt(np.outer(ss, ss))
    with np.errstate(invalid="ignore", divide="ignore"):
        o = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    o = np.clip(o, -1.0, 1.0)
    degenerate = const[:, None] | const[None, :]
    o[degenerate] = 0.0
    # exact unit diagonal and symmetry despite rounding
    o = 0.5 * (o + o.T)
    idx = np.arange(o.shape[0])
    o[idx, idx] = np.where(const, 0.0, 1.0)
    return o, degenerate


def selection_probs(q) -> np.ndarray:
    """Per-slot injection distribution ``softmax(-q)`` over regions; ``q (T, N)``."""
    q = np.asarray(q, dtype=np.float64)
    z = -q - (-q).max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def incident_augment(x: np.ndarray, q, cfg: AugmentConfig, seed: int,
                     magnitude: float) -> tuple[np.ndarray, np.ndarray]:
    """Inject risk spikes into ``ceil(feature_rate * N)`` regions per slot.

    ``x`` is one window ``(T, N, d)``; regions are drawn without replacement
    with probabilities ``softmax(-q[t])``. Each selected cell's risk channel
    grows by ``magnitude``. Returns the augmented copy and the boolean
    ``(T, N)`` mask of perturbed cells.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    T, N = x.shape[0], x.shape[1]
    mask = np.zeros((T, N), dtype=bool)
    m = math.ceil(cfg.feature_rate * N - 1e-12)
    if m == 0 or magnitude <= 0:
        return x, mask
    alpha = selection_probs(np.asarray(q, dtype=np.float64).reshape(T, N))
    rng = SplitMix64(seed)
    for t in range(T):
        for n in rng.sample_without_replacement(alpha[t].tolist(), m):
            mask[t, n] = True
    x[..., 0] += magnitude * mask
    return x, mask


def graph_augment(adj: np.ndarray, o: np.ndarray, cfg: AugmentConfig, seed: int) -> np.ndarray:
    """Mask heterogeneous edges and add edges between correlated non-neighbours.

    ``round(graph_rate * |E|)`` existing edges are removed, drawn without
    replacement with probability ``softmax(-o)`` over the edge set. The same
    number of non-adjacent pairs with the highest correlation (ties by index
    order) become new edges.
    """
    adj = np.asarray(adj, dtype=np.float64)
    out = adj.copy()
    n = adj.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    is_edge = adj[iu, ju] > 0
    edges = [(int(i), int(j)) for i, j in zip(iu[is_edge], ju[is_edge])]
    non_edges = [(int(i), int(j)) for i, j in zip(iu[~is_edge], ju[~is_edge])]
    budget = int(math.floor(cfg.graph_rate * len(edges) + 0.5))
    if budget == 0:
        return out

    scores = np.array([-o[i, j] for i, j in edges])
    beta = np.exp(scores - scores.max())
    beta /= beta.sum()
    rng = SplitMix64(seed)
    for k in rng.sample_without_replacement(beta.tolist(), budget):
        i, j = edges[k]
        out[i, j] = out[j, i] = 0.0

    # stable sort on -o keeps index order among ties
    ranked = sorted(range(len(non_edges)), key=lambda k: -o[non_edges[k]])
    for k in ranked[:budget]:
        i, j = non_edges[k]
        out[i, j] = out[j, i] = 1.0
    return out
