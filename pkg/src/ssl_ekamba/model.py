"""The assembled SSL-eKamba network and its per-batch loss computation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import augment as aug
from .config import RunConfig
from .ekan import SplineGrid
from .graph import StEncoder, normalize_adjacency
from .numerics import DTYPE, silu
from .prng import derive
from .ssl import (AutoEncoder, Bilinear, Fusion, autoencode, bilinear_scores, gram,
                  kmeans_loss, reconstruction_loss, temporal_contrastive_loss,
                  update_cluster_indicator)


class PredictHead(nn.Module):
    """Two-layer MLP ``D -> D/2 -> 1`` with SiLU hidden activation."""

    def __init__(self, d_model: int):
        super().__init__()
        hidden = max(1, d_model // 2)
        self.fc1 = nn.Linear(d_model, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, 1, dtype=DTYPE)

    def forward(self, M: torch.Tensor) -> torch.Tensor:
        return self.fc2(silu(self.fc1(M))).squeeze(-1)


def predict_head(M: torch.Tensor, head: PredictHead, rows: int, cols: int) -> torch.Tensor:
    """Risk map ``(..., I, J)`` from region embeddings ``(..., N, D)``."""
    return head(M).reshape(*M.shape[:-2], rows, cols)


def risk_level_of(x) -> np.ndarray:
    """Bucket denormalized risk into levels 0, 1, 2, >=3."""
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any():
        raise ValueError("risk must be non-negative")
    return np.minimum(np.floor(x + 1e-9), 3).astype(np.int64)


def weighted_prediction_loss(X, X_hat, weights, levels=None) -> torch.Tensor:
    """``1/2 sum lambda_level (X - X_hat)^2`` over the trailing map axes, mean over a batch.

    ``levels`` defaults to the level of ``X`` itself (i.e. ``X`` is already
    in raw risk units); pass them explicitly when ``X`` is normalized.
    """
    X = torch.as_tensor(X, dtype=DTYPE)
    if levels is None:
        levels = risk_level_of(X.detach().numpy())
    lam = torch.as_tensor(np.asarray(weights, dtype=np.float64)[np.asarray(levels)], dtype=DTYPE)
    sq = lam * (X - X_hat) ** 2
    if sq.dim() <= 1:
        return 0.5 * sq.sum()
    return 0.5 * sq.reshape(sq.shape[0], -1).sum(-1).mean()


def joint_loss(pred, rec, km, temporal, lambdas) -> torch.Tensor:
    l1, l2, l3, l4 = lambdas
    return l1 * pred + l2 * (rec + l4 * km) + l3 * temporal


@dataclass
class BatchLosses:
    total: torch.Tensor
    pred: torch.Tensor
    rec: torch.Tensor
    kmeans: torch.Tensor
    temporal: torch.Tensor
    prediction: torch.Tensor  # (B, N) normalized
    gram: torch.Tensor | None  # detached batch-mean Gram for the F refresh


class SslEkamba(nn.Module):
    def __init__(self, cfg: RunConfig, d_feat: int, num_regions: int):
        super().__init__()
        m = cfg.model
        grid = SplineGrid(m.spline_degree, m.num_basis)
        self.cfg = cfg
        self.num_regions = num_regions
        self.encoder = StEncoder(d_feat, m.d_model, m.layers, m.d_state, m.conv_width,
                                 m.ekan_layers, grid, m.readout)
        self.encoder.set_parallel_scan(m.parallel_scan)
        self.discrepancy = aug.Discrepancy(m.d_model)
        self.fusion = Fusion(m.d_model)
        self.autoencoder = AutoEncoder(m.d_model, cfg.ssl.latent_dim)
        self.bilinear = Bilinear(m.d_model)
        self.head = PredictHead(m.d_model)
        # cluster indicator, refreshed outside autograd
        self.register_buffer("F", torch.zeros(0, 0, dtype=DTYPE))

    @property
    def has_F(self) -> bool:
        return self.F.numel() > 0

    def predict(self, x: torch.Tensor, adj_hat: torch.Tensor) -> torch.Tensor:
        """Normalized risk per region ``(B, N)``."""
        return self.head(self.encoder(x, adj_hat).M)

    def augment_batch(self, x: np.ndarray, first: torch.Tensor, adj: np.ndarray,
                      seeds: list[int], magnitude: float):
        """Augmented windows ``(B, T, N, d)`` and normalized graphs ``(B, N, N)``."""
        cfg = self.cfg.augment
        with torch.no_grad():
            q = aug.local_global_scores(first, self.discrepancy.w0).numpy()
        xs, adjs = [], []
        for b, seed in enumerate(seeds):
            xb, _ = aug.incident_augment(x[b], q[b], cfg, derive(seed, 0), magnitude)
            o, _ = aug.pearson_matrix(q[b])
            xs.append(xb)
            adjs.append(aug.graph_augment(adj, o, cfg, derive(seed, 1)))
        return np.stack(xs), normalize_adjacency(np.stack(adjs))

    def losses(self, x: np.ndarray, y_norm: np.ndarray, levels: np.ndarray,
               adj: np.ndarray, adj_hat: torch.Tensor, seeds: list[int],
               magnitude: float, lambdas=None) -> BatchLosses:
        lc = self.cfg.loss
        if lambdas is None:
            lambdas = (lc.pred, lc.spatial, lc.temporal, lc.kmeans)
        xt = torch.as_tensor(x, dtype=DTYPE)
        out = self.encoder(xt, adj_hat)
        pred = self.head(out.M)
        l_pred = weighted_prediction_loss(torch.as_tensor(y_norm, dtype=DTYPE), pred,
                                          lc.risk_weights, levels)
        zero = torch.zeros((), dtype=DTYPE)
        l_rec = l_km = l_t = zero
        G = None
        if lambdas[1] > 0 or lambdas[2] > 0:
            x_aug, adj_hat_aug = self.augment_batch(x, out.first, adj, seeds, magnitude)
            out_aug = self.encoder(torch.as_tensor(x_aug, dtype=DTYPE), adj_hat_aug)
            if lambdas[1] > 0:
                V = self.fusion(out.M, out_aug.M)
                Dlat, V_rec = autoencode(V, self.autoencoder)
                l_rec = reconstruction_loss(V, V_rec)
                G = gram(Dlat.detach()).mean(0)
                if not self.has_F:
                    self.F = update_cluster_indicator(G, self.cfg.ssl.clusters, is_gram=True)
                l_km = kmeans_loss(Dlat, self.F)
            if lambdas[2] > 0:
                pos, allp = bilinear_scores(out.seq, out_aug.seq, self.bilinear.W)
                l_t = temporal_contrastive_loss(pos, allp, self.cfg.ssl.temperature)
        total = joint_loss(l_pred, l_rec, l_km, l_t, lambdas)
        return BatchLosses(total, l_pred, l_rec, l_km, l_t, pred.detach(), G)


def build_model(cfg: RunConfig, d_feat: int, num_regions: int, seed: int | None = None) -> SslEkamba:
    """Construct with parameters drawn from a dedicated torch generator state."""
    seed = cfg.train.seed if seed is None else seed
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = SslEkamba(cfg, d_feat, num_regions)
    finally:
        torch.random.set_rng_state(state)
    return model
