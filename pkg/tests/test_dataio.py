import json

import numpy as np
import pytest

from ssl_ekamba.dataio import (ARCHETYPES, CityGrid, DataError, EventRecord, NormStats, WindowConfig,
                               build_windows, grid_adjacency, load_city, make_dataset,
                               minmax_normalize, rasterize_events, read_events_csv, split_dataset,
                               synth_city, validate_event, write_city, write_events_csv)


def test_rasterize_examples():
    g = CityGrid(2, 3)
    assert not rasterize_events([], g, 4).any()
    r = rasterize_events([EventRecord(1, 0, 2, 3)], g, 4)
    assert r[1, 0, 2] == 3 and r.sum() == 3
    r = rasterize_events([EventRecord(2, 1, 1, 1), EventRecord(2, 1, 1, 2)], g, 4)
    assert r[2, 1, 1] == 3


@pytest.mark.parametrize("ev", [EventRecord(0, 2, 0, 1), EventRecord(0, 0, -1, 1),
                                EventRecord(9, 0, 0, 1), EventRecord(0, 0, 0, 4)])
def test_validate_event_rejects(ev):
    with pytest.raises(DataError):
        validate_event(ev, CityGrid(2, 2), 5)


def test_minmax_examples():
    x = np.array([2.0, 4.0, 6.0])[:, None]
    out, stats = minmax_normalize(x)
    assert out[:, 0].tolist() == [0.0, 0.5, 1.0]
    assert np.allclose(stats.denormalize(out), x)
    x = np.array([0.0, 0.3, 1.0])[:, None]
    assert np.array_equal(minmax_normalize(x)[0], x)
    out, stats = minmax_normalize(np.full((4, 1), 5.0))
    assert not out.any() and stats.degenerate.tolist() == [True]


def test_minmax_uses_train_slots_only():
    x = np.array([0.0, 2.0, 10.0])[:, None]
    out, stats = minmax_normalize(x, train_slots=2)
    assert stats.max.tolist() == [2.0]
    assert out[2, 0] == 5.0


def test_norm_stats_roundtrip():
    s = NormStats(np.array([0.0, 1.0]), np.array([2.0, 1.0]))
    t = NormStats.from_dict(json.loads(json.dumps(s.to_dict())))
    assert t.min.tolist() == s.min.tolist() and t.degenerate.tolist() == [False, True]


def test_window_examples():
    cfg = WindowConfig(recent=3, weekly=4, slots_per_week=168)
    w = {s.target: s for s in build_windows(1001, cfg)}
    assert set(w[1000].inputs) == {328, 496, 664, 832, 997, 998, 999}
    assert w[1000].inputs == (328, 496, 664, 832, 997, 998, 999)
    w = build_windows(6, WindowConfig(recent=1, weekly=0))
    assert {s.target: s.inputs for s in w}[5] == (4,)
    with pytest.raises(DataError):
        build_windows(10, WindowConfig(weekly=4))


def test_windows_never_reference_future():
    for s in build_windows(800, WindowConfig()):
        assert max(s.inputs) < s.target and min(s.inputs) >= 0


def test_split_examples():
    assert [len(p) for p in split_dataset(list(range(10)))] == [6, 2, 2]
    assert [len(p) for p in split_dataset(list(range(11)))] == [6, 2, 3]
    tr, va, te = split_dataset(list(range(37)))
    assert max(tr) < min(va) and max(va) < min(te)
    with pytest.raises(DataError):
        split_dataset([1, 2, 3, 4])


def test_adjacency_examples():
    a = grid_adjacency(CityGrid(1, 2))
    assert a.tolist() == [[0, 1], [1, 0]]
    assert grid_adjacency(CityGrid(2, 2)).sum() / 2 == 4
    assert grid_adjacency(CityGrid(2, 2), 8).sum() / 2 == 6
    for r, c in [(3, 5), (4, 4), (1, 7)]:
        a = grid_adjacency(CityGrid(r, c))
        assert np.array_equal(a, a.T) and not np.diag(a).any()


def test_synth_determinism():
    a, b = synth_city(3, 3, 3, 400, channels=3), synth_city(3, 3, 3, 400, channels=3)
    assert a.events == b.events
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, synth_city(4, 3, 3, 400).features)


def test_synth_coverage_regression():
    city = synth_city(1, 4, 4, 2000)
    per_region = city.features[..., 0].reshape(2000, -1).sum(0)
    # frozen: all 16 regions have events (criterion asks for >= 90%)
    assert (per_region > 0).mean() >= 0.9
    assert (per_region > 0).sum() == 16


def test_synth_archetype_ordering():
    city = synth_city(1, 4, 4, 2000)
    risk = city.features[..., 0].reshape(2000, -1)
    means = {a: risk[:, np.array(city.archetypes) == a].mean() for a in ARCHETYPES}
    assert means["hub"] > means["commuter"] > means["residential"]


def test_city_roundtrip(tmp_path):
    city = synth_city(2, 2, 3, 300, channels=3)
    write_city(tmp_path, city)
    data = load_city(tmp_path)
    assert np.array_equal(data.features, city.features)
    assert data.meta["rows"] == 2 and data.meta["channels"] == 3
    assert b"\r\n" not in (tmp_path / "events.csv").read_bytes()


def test_events_csv_roundtrip(tmp_path):
    evs = [EventRecord(0, 1, 1, 2), EventRecord(5, 0, 0, 3)]
    write_events_csv(tmp_path / "e.csv", evs)
    assert read_events_csv(tmp_path / "e.csv") == evs
    (tmp_path / "bad.csv").write_text("slot,row,col,severity\n1,2\n")
    with pytest.raises(DataError):
        read_events_csv(tmp_path / "bad.csv")


def test_make_dataset_stats_from_train_and_override():
    city = synth_city(1, 2, 2, 900)
    ds = make_dataset(city.grid, city.features, WindowConfig(), max_samples=50)
    assert len(ds.train) == 30 and len(ds.val) == 10 and len(ds.test) == 10
    x, y_norm, y_raw = ds.batch(ds.train[:4])
    assert x.shape == (4, 7, 4, 1) and y_norm.shape == y_raw.shape == (4, 4)
    assert np.allclose(ds.stats.denormalize(y_norm, 0), y_raw)
    again = make_dataset(city.grid, city.features, WindowConfig(), 50, stats=ds.stats)
    assert np.array_equal(again.features, ds.features)
