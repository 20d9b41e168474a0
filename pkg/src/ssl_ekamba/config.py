"""Run configuration: nested dataclasses with strict JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .dataio import WindowConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    rows: int = 4
    cols: int = 4
    cell_size_km: float = 2.0
    neighborhood: int = 4


@dataclass(frozen=True)
class DataConfig:
    seed: int = 1
    num_slots: int = 2000
    channels: int = 1
    slot_minutes: int = 60
    max_samples: int | None = None


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_state: int = 16
    conv_width: int = 4
    layers: int = 2
    ekan_layers: int = 1
    spline_degree: int = 3
    num_basis: int = 8
    readout: str = "last"
    parallel_scan: bool = False


@dataclass(frozen=True)
class SslConfig:
    temperature: float = 0.5
    clusters: int = 4
    latent_dim: int | None = None  # default d_model // 2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("ssl.temperature must be positive")


@dataclass(frozen=True)
class LossConfig:
    risk_weights: tuple[float, float, float, float] = (0.05, 0.2, 0.25, 0.5)
    # lambda_2, lambda_3 put each weighted SSL gradient on the encoder at about
    # the norm of the prediction gradient at initialization (the raw
    # reconstruction and contrastive gradients are ~240x and ~18x larger)
    pred: float = 1.0  # lambda_1
    spatial: float = 0.005  # lambda_2
    temporal: float = 0.05  # lambda_3
    kmeans: float = 0.1  # lambda_4
    dwa: bool = False
    dwa_temperature: float = 2.0

    def __post_init__(self):
        if len(self.risk_weights) != 4 or any(w <= 0 for w in self.risk_weights):
            raise ConfigError("loss.risk_weights needs four positive values")
        if min(self.pred, self.spatial, self.temporal, self.kmeans) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1:
            raise ConfigError("train.batch_size and train.patience must be >= 1")


@dataclass(frozen=True)
class MetricsConfig:
    k: int = 20


@dataclass(frozen=True)
class BenchConfig:
    d_model: int = 512
    batch: int = 32
    seq_len: int = 2
    num_basis: int = 8
    degree: int = 3
    repeats: int = 30
    warmup: int = 5
    variants: tuple[str, ...] = ("ekan", "naive_kan", "linear")
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    data: DataConfig = field(default_factory=DataConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return to_dict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return from_dict(cls, d)

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def replace(self, **sections) -> "RunConfig":
        """Override fields per section, e.g. ``replace(train={"lr": 0.0})``."""
        updates = {}
        for name, fields in sections.items():
            updates[name] = dataclasses.replace(getattr(self, name), **fields)
        return dataclasses.replace(self, **updates)


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def from_dict(cls, d: dict, path: str = ""):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = from_dict(hint, value, f"{path}{name}.")
        elif typing.get_origin(hint) is tuple:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc
