"""Grid/raster utilities, sliding windows, splits and a synthetic city.

Everything here is plain numpy; tensors for the model are built later.
Feature arrays are laid out ``(num_slots, I, J, d)`` with channel 0 the
accident risk map.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SEVERITY_MINOR, SEVERITY_INJURY, SEVERITY_FATAL = 1, 2, 3
EVENT_HEADER = ["slot", "row", "col", "severity"]
OVERLAY_HEADER = ["slot", "row", "col", "channel", "value"]
ARCHETYPES = ("residential", "commuter", "hub")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class CityGrid:
    rows: int
    cols: int
    cell_size_km: float = 2.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DataError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def num_regions(self) -> int:
        return self.rows * self.cols

    def region(self, row: int, col: int) -> int:
        return row * self.cols + col

    def cell(self, region: int) -> tuple[int, int]:
        return divmod(region, self.cols)


@dataclass(frozen=True)
class EventRecord:
    slot: int
    row: int
    col: int
    severity: int


@dataclass(frozen=True)
class WindowConfig:
    recent: int = 3  # rho
    weekly: int = 4  # kappa
    slots_per_week: int = 168

    def __post_init__(self):
        if self.recent < 0 or self.weekly < 0 or self.recent + self.weekly < 1:
            raise DataError("need recent >= 0, weekly >= 0 and recent + weekly >= 1")
        if self.weekly and self.slots_per_week <= self.recent:
            raise DataError("slots_per_week must exceed the recent window")

    @property
    def length(self) -> int:
        return self.recent + self.weekly


@dataclass(frozen=True)
class SampleWindow:
    inputs: tuple[int, ...]
    target: int


@dataclass
class NormStats:
    """Per-channel min/max from the training split."""

    min: np.ndarray
    max: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = self.max == self.min
        self.degenerate = np.asarray(self.degenerate, dtype=bool)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        span = np.where(self.degenerate, 1.0, self.max - self.min)
        out = (x - self.min) / span
        return np.where(self.degenerate, 0.0, out)

    def denormalize(self, x: np.ndarray, channel: int | None = None) -> np.ndarray:
        lo, hi = self.min, self.max
        if channel is not None:
            lo, hi = lo[channel], hi[channel]
        return x * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {
            "min": [float(v) for v in self.min],
            "max": [float(v) for v in self.max],
            "degenerate": [bool(v) for v in self.degenerate],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["min"]), np.array(d["max"]), np.array(d["degenerate"]))


def validate_event(ev: EventRecord, grid: CityGrid, num_slots: int) -> None:
    if not (0 <= ev.row < grid.rows and 0 <= ev.col < grid.cols):
        raise DataError(f"event {ev} lies outside the {grid.rows}x{grid.cols} grid")
    if not 0 <= ev.slot < num_slots:
        raise DataError(f"event {ev} has slot outside [0, {num_slots})")
    if ev.severity not in (SEVERITY_MINOR, SEVERITY_INJURY, SEVERITY_FATAL):
        raise DataError(f"event {ev} has severity outside {{1, 2, 3}}")


def rasterize_events(events: Iterable[EventRecord], grid: CityGrid, num_slots: int) -> np.ndarray:
    """Risk maps ``(num_slots, I, J)``: per cell and slot, the sum of severities."""
    risk = np.zeros((num_slots, grid.rows, grid.cols), dtype=np.float64)
    for ev in events:
        validate_event(ev, grid, num_slots)
        risk[ev.slot, ev.row, ev.col] += ev.severity
    return risk


def minmax_normalize(series: np.ndarray, train_slots: int | None = None):
    """Min-max scale the last axis (channels) using the first ``train_slots`` slots.

    Returns ``(normalized, stats)``. A constant channel maps to 0 and is
    flagged in ``stats.degenerate``.
    """
    series = np.asarray(series, dtype=np.float64)
    ref = series if train_slots is None else series[:train_slots]
    axes = tuple(range(ref.ndim - 1))
    stats = NormStats(ref.min(axis=axes), ref.max(axis=axes))
    for ch in np.nonzero(stats.degenerate)[0]:
        log.warning("channel %d is constant on the reference slots; mapped to 0", ch)
    return stats.normalize(series), stats


def build_windows(num_slots: int, cfg: WindowConfig) -> list[SampleWindow]:
    """One sample per eligible target slot; inputs ordered oldest to newest."""
    first = max(cfg.weekly * cfg.slots_per_week, cfg.recent)
    if num_slots <= cfg.weekly * cfg.slots_per_week + cfg.recent:
        raise DataError(
            f"series of {num_slots} slots is too short: need more than "
            f"{cfg.weekly * cfg.slots_per_week + cfg.recent} slots for {cfg.weekly} weekly lookbacks of {cfg.slots_per_week} "
            f"and {cfg.recent} recent slots"
        )
    out = []
    for t in range(first, num_slots):
        weekly = [t - k * cfg.slots_per_week for k in range(cfg.weekly, 0, -1)]
        recent = list(range(t - cfg.recent, t))
        out.append(SampleWindow(tuple(weekly + recent), t))
    return out


def split_dataset(samples: Sequence):
    """Chronological 6:2:2 split; the remainder goes to test."""
    n = len(samples)
    if n < 5:
        raise DataError(f"need at least 5 samples to split, got {n}")
    n_train = math.floor(0.6 * n)
    n_val = math.floor(0.2 * n)
    return (
        list(samples[:n_train]),
        list(samples[n_train : n_train + n_val]),
        list(samples[n_train + n_val :]),
    )


def grid_adjacency(grid: CityGrid, neighborhood: int = 4) -> np.ndarray:
    """0/1 adjacency of grid cells under 4- or 8-neighborhood."""
    if neighborhood not in (4, 8):
        raise DataError("neighborhood must be 4 or 8")
    n = grid.num_regions
    adj = np.zeros((n, n), dtype=np.float64)
    steps = [(0, 1), (1, 0)]
    if neighborhood == 8:
        steps += [(1, 1), (1, -1)]
    for r in range(grid.rows):
        for c in range(grid.cols):
            for dr, dc in steps:
                r2, c2 = r + dr, c + dc
                if 0 <= r2 < grid.rows and 0 <= c2 < grid.cols:
                    a, b = grid.region(r, c), grid.region(r2, c2)
                    adj[a, b] = adj[b, a] = 1.0
    return adj


# --- synthetic city -------------------------------------------------------

# Expected events per cell-hour over the day, per archetype.
def _daily_rate(archetype: str, hour: np.ndarray, weekend: np.ndarray) -> np.ndarray:
    def bump(center, width):
        d = np.minimum(np.abs(hour - center), 24 - np.abs(hour - center))
        return np.exp(-0.5 * (d / width) ** 2)

    if archetype == "hub":
        rate = 2.4 + 3.2 * bump(13, 4.0) + 1.6 * bump(19, 2.0)
        return rate * np.where(weekend, 0.8, 1.0)
    if archetype == "commuter":
        rate = 0.3 + 4.0 * bump(8, 1.2) + 4.0 * bump(17.5, 1.5)
        return rate * np.where(weekend, 0.35, 1.0)
    rate = 0.16 + 1.2 * bump(20, 2.5)
    return rate * np.where(weekend, 1.3, 1.0)


@dataclass
class SynthCity:
    grid: CityGrid
    features: np.ndarray  # (num_slots, I, J, d)
    events: list[EventRecord]
    archetypes: list[str]  # per region, ground truth for diagnostics
    seed: int
    slot_minutes: int = 60

    @property
    def num_slots(self) -> int:
        return self.features.shape[0]


def synth_city(seed: int, rows: int, cols: int, num_slots: int, channels: int = 1) -> SynthCity:
    """Deterministic synthetic city with hub/commuter/residential regions.

    Event counts are Poisson with a daily (and weekday/weekend) rate per
    archetype, scaled per region; severities are drawn 1/2/3 with
    probabilities 0.7/0.25/0.05. Optional channels 1 and 2 are inflow and
    outflow activity counts that track the same daily profile.
    """
    grid = CityGrid(rows, cols)
    n = grid.num_regions
    if n > 400 or num_slots > 10000:
        raise DataError("synthetic city limited to 400 regions and 10000 slots")
    if not 1 <= channels <= 3:
        raise DataError("channels must be 1 (risk), 2 (+inflow) or 3 (+outflow)")
    rng = np.random.Generator(np.random.PCG64(seed))

    # every archetype present once the grid has >= 3 cells
    labels = [ARCHETYPES[i % 3] for i in range(n)]
    labels = [labels[i] for i in rng.permutation(n)]
    scale = rng.uniform(0.75, 1.25, size=n)

    slots = np.arange(num_slots)
    hour = (slots % 24).astype(np.float64)
    weekend = ((slots // 24) % 7) >= 5

    events: list[EventRecord] = []
    features = np.zeros((num_slots, rows, cols, channels), dtype=np.float64)
    severity_p = [0.7, 0.25, 0.05]
    for region in range(n):
        r, c = grid.cell(region)
        lam = scale[region] * _daily_rate(labels[region], hour, weekend)
        counts = rng.poisson(lam)
        for t in np.nonzero(counts)[0]:
            sev = rng.choice(3, size=int(counts[t]), p=severity_p) + 1
            for s in sev:
                events.append(EventRecord(int(t), r, c, int(s)))
        if channels >= 2:
            features[:, r, c, 1] = rng.poisson(20.0 * lam)
        if channels >= 3:
            features[:, r, c, 2] = rng.poisson(18.0 * np.roll(lam, 1))
    events.sort(key=lambda e: (e.slot, e.row, e.col, e.severity))
    features[..., 0] = rasterize_events(events, grid, num_slots)
    return SynthCity(grid, features, events, labels, seed)


# --- files ----------------------------------------------------------------


def write_events_csv(path: Path, events: Iterable[EventRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for ev in events:
            w.writerow([ev.slot, ev.row, ev.col, ev.severity])


def read_events_csv(path: Path) -> list[EventRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EVENT_HEADER:
            raise DataError(f"{path}: expected header {','.join(EVENT_HEADER)}, got {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                slot, r, c, sev = (int(v) for v in row)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row}") from exc
            out.append(EventRecord(slot, r, c, sev))
    return out


def write_overlay_csv(path: Path, features: np.ndarray) -> None:
    """Non-risk channels as ``slot,row,col,channel,value`` rows (nonzero only)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OVERLAY_HEADER)
        for t, r, c, ch in zip(*np.nonzero(features[..., 1:])):
            w.writerow([t, r, c, ch + 1, repr(float(features[t, r, c, ch + 1]))])


def read_overlay_csv(path: Path, features: np.ndarray) -> None:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != OVERLAY_HEADER:
            raise DataError(f"{path}: expected header {','.join(OVERLAY_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                t, r, c, ch = (int(v) for v in row[:4])
                features[t, r, c, ch] = float(row[4])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row}") from exc


def write_city(out: Path, city: SynthCity) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_events_csv(out / "events.csv", city.events)
    channels = city.features.shape[-1]
    if channels > 1:
        write_overlay_csv(out / "overlay.csv", city.features)
    meta = {
        "rows": city.grid.rows,
        "cols": city.grid.cols,
        "cell_size_km": city.grid.cell_size_km,
        "num_slots": city.num_slots,
        "channels": channels,
        "seed": city.seed,
        "slot_minutes": city.slot_minutes,
        "archetypes": city.archetypes,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class CityData:
    grid: CityGrid
    features: np.ndarray
    meta: dict


def load_city(data_dir: Path) -> CityData:
    data_dir = Path(data_dir)
    meta = json.loads((data_dir / "meta.json").read_text(encoding="utf-8"))
    grid = CityGrid(int(meta["rows"]), int(meta["cols"]), float(meta.get("cell_size_km", 2.0)))
    num_slots = int(meta["num_slots"])
    channels = int(meta.get("channels", 1))
    events = read_events_csv(data_dir / "events.csv")
    features = np.zeros((num_slots, grid.rows, grid.cols, channels), dtype=np.float64)
    features[..., 0] = rasterize_events(events, grid, num_slots)
    overlay = data_dir / "overlay.csv"
    if channels > 1 and overlay.exists():
        read_overlay_csv(overlay, features)
    return CityData(grid, features, meta)


# --- model-ready dataset ----------------------------------------------------


@dataclass
class Dataset:
    """Windows over a normalized feature series, split chronologically."""

    grid: CityGrid
    features: np.ndarray  # normalized, (num_slots, N, d)
    raw_risk: np.ndarray  # (num_slots, N)
    stats: NormStats
    window: WindowConfig
    train: list[SampleWindow]
    val: list[SampleWindow]
    test: list[SampleWindow]

    @property
    def num_regions(self) -> int:
        return self.grid.num_regions

    @property
    def channels(self) -> int:
        return self.features.shape[-1]

    def split(self, name: str) -> list[SampleWindow]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise DataError(f"unknown split {name!r}") from None

    def batch(self, samples: Sequence[SampleWindow]):
        """Stack samples into ``x (B, T, N, d)``, normalized target and raw target ``(B, N)``."""
        idx = np.array([s.inputs for s in samples])
        tgt = np.array([s.target for s in samples])
        x = self.features[idx]
        return x, self.features[tgt, :, 0], self.raw_risk[tgt]

    @property
    def risk_std(self) -> float:
        """Std of the normalized risk channel over the training slots."""
        end = self.train[-1].target + 1
        return float(self.features[:end, :, 0].std())


def make_dataset(
    grid: CityGrid,
    features: np.ndarray,
    window: WindowConfig,
    max_samples: int | None = None,
    stats: NormStats | None = None,
) -> Dataset:
    """Window, split and min-max normalize (statistics from training slots only).

    ``max_samples`` keeps the most recent samples, which is how desk-scale
    runs stay small while still having full weekly lookbacks. Passing
    ``stats`` (e.g. from a checkpoint) reuses them instead of refitting.
    """
    num_slots = features.shape[0]
    samples = build_windows(num_slots, window)
    if max_samples is not None:
        samples = samples[-max_samples:]
    train, val, test = split_dataset(samples)
    flat = features.reshape(num_slots, grid.num_regions, -1)
    train_end = train[-1].target + 1
    if stats is None:
        normed, stats = minmax_normalize(flat, train_slots=train_end)
    else:
        if stats.min.shape != (flat.shape[-1],):
            raise DataError(f"stats cover {stats.min.shape[0]} channels, data has {flat.shape[-1]}")
        normed = stats.normalize(flat)
    return Dataset(grid, normed, flat[..., 0].copy(), stats, window, train, val, test)
