import numpy as np
import pytest
import torch

from ssl_ekamba.dataio import CityGrid, grid_adjacency
from ssl_ekamba.graph import GcnLayer, StEncoder, gcn_layer, normalize_adjacency, st_encode
from ssl_ekamba.numerics import DTYPE, grad_check, relu


def test_normalize_examples():
    a = normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert torch.allclose(a, torch.full((2, 2), 0.5, dtype=DTYPE), atol=1e-15)
    a = normalize_adjacency(np.array([[0.0, 1, 0], [1, 0, 0], [0, 0, 0]]))
    assert a[2, 2].item() == 1.0 and a[2, :2].abs().sum().item() == 0.0


def test_normalize_symmetric_random(rng):
    for _ in range(50):
        n = rng.integers(2, 12)
        m = np.triu(rng.random((n, n)) < 0.4, 1).astype(float)
        a = normalize_adjacency(m + m.T)
        assert torch.equal(a, a.T)
        # spectrum of the normalized adjacency lies in (-1, 1]
        assert torch.linalg.eigvalsh(a).max().item() <= 1 + 1e-12


def test_normalize_rejects_asymmetric():
    with pytest.raises(ValueError):
        normalize_adjacency(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_normalize_batch_matches_single(rng):
    g = grid_adjacency(CityGrid(2, 3))
    b = normalize_adjacency(np.stack([g, np.zeros_like(g)]))
    assert torch.equal(b[0], normalize_adjacency(g))
    assert torch.equal(b[1], torch.eye(6, dtype=DTYPE))


def test_gcn_examples(gen):
    h = torch.randn(4, 3, generator=gen, dtype=DTYPE)
    eye4, eye3 = torch.eye(4, dtype=DTYPE), torch.eye(3, dtype=DTYPE)
    assert torch.equal(gcn_layer(h, eye4, eye3), relu(h))
    assert not gcn_layer(-h.abs() - 0.1, eye4, eye3).any()
    out = gcn_layer(torch.tensor([[2.0], [4.0]], dtype=DTYPE),
                    torch.full((2, 2), 0.5, dtype=DTYPE), torch.tensor([[1.0]], dtype=DTYPE))
    assert out.tolist() == [[3.0], [3.0]]


def test_gcn_shape_errors():
    with pytest.raises(ValueError):
        gcn_layer(torch.zeros(3, 2, dtype=DTYPE), torch.eye(3, dtype=DTYPE), torch.eye(3, dtype=DTYPE))
    with pytest.raises(ValueError):
        gcn_layer(torch.zeros(3, 2, dtype=DTYPE), torch.eye(4, dtype=DTYPE), torch.eye(2, dtype=DTYPE))


def test_gcn_batched_adjacency_over_time(gen):
    h = torch.randn(2, 5, 3, 4, generator=gen, dtype=DTYPE)
    adj = normalize_adjacency(np.stack([grid_adjacency(CityGrid(1, 3)), np.zeros((3, 3))]))
    W = torch.randn(4, 4, generator=gen, dtype=DTYPE)
    out = gcn_layer(h, adj, W)
    for b in range(2):
        assert torch.allclose(out[b], gcn_layer(h[b], adj[b], W), atol=1e-14)


def test_gcn_gradient(gen):
    torch.manual_seed(0)
    layer = GcnLayer(3, 2)
    h = torch.randn(4, 3, generator=gen, dtype=DTYPE)
    adj = normalize_adjacency(grid_adjacency(CityGrid(2, 2)))
    assert grad_check(lambda: layer(h, adj).pow(2).sum(), [layer.W]) < 1e-6


def _encoder(seed=0, **kw):
    torch.manual_seed(seed)
    return StEncoder(2, d_model=6, d_state=3, **kw)


def test_encoder_shapes_and_determinism(gen):
    x = torch.randn(3, 7, 4, 2, generator=gen, dtype=DTYPE)
    adj = normalize_adjacency(grid_adjacency(CityGrid(2, 2)))
    a, b = st_encode(x, adj, _encoder()), st_encode(x, adj, _encoder())
    assert a.M.shape == (3, 4, 6) and a.seq.shape == (3, 7, 4, 6) and a.first.shape == (3, 7, 4, 6)
    assert torch.equal(a.M, b.M)
    single = st_encode(x[1], adj, _encoder())
    assert single.M.shape == (4, 6)
    assert torch.allclose(single.M, a.M[1], atol=1e-13)


def test_encoder_identity_gcn_is_block_composition(gen):
    enc = _encoder(layers=1)
    with torch.no_grad():
        enc.gcn[0].W.copy_(torch.eye(6, dtype=DTYPE))
    x = torch.randn(2, 5, 3, 2, generator=gen, dtype=DTYPE)
    eye = torch.eye(3, dtype=DTYPE)
    h = enc.input_proj(x).transpose(1, 2)
    manual = enc.temporal_out[0](relu(enc.temporal_in[0](h))).transpose(1, 2)
    out = st_encode(x, eye, enc)
    assert torch.equal(out.seq, manual)
    assert torch.equal(out.M, manual[:, -1])


def test_encoder_region_permutation_equivariance(gen):
    enc = _encoder()
    grid = CityGrid(2, 3)
    adj = grid_adjacency(grid)
    perm = np.array([4, 0, 5, 2, 1, 3])
    x = torch.randn(2, 6, 6, 2, generator=gen, dtype=DTYPE)
    a = st_encode(x, normalize_adjacency(adj), enc).M
    b = st_encode(x[:, :, perm], normalize_adjacency(adj[np.ix_(perm, perm)]), enc).M
    assert (a[:, perm] - b).abs().max().item() < 1e-12


def test_encoder_readout_mean(gen):
    enc = _encoder(readout="mean")
    x = torch.randn(1, 4, 2, 2, generator=gen, dtype=DTYPE)
    out = st_encode(x, torch.eye(2, dtype=DTYPE), enc)
    assert torch.allclose(out.M, out.seq.mean(1), atol=1e-15)
    with pytest.raises(ValueError):
        _encoder(readout="max")
