"""Adam, the joint training loop with early stopping, and binary checkpoints."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .dataio import Dataset, NormStats, grid_adjacency
from .graph import normalize_adjacency
from .metrics import rmse
from .model import SslEkamba, build_model, risk_level_of, weighted_prediction_loss
from .numerics import DTYPE
from .prng import SplitMix64, derive
from .ssl import update_cluster_indicator

log = logging.getLogger(__name__)

MAGIC = b"SSLEKAMB"
FORMAT_VERSION = 1

HISTORY_FIELDS = ["epoch", "loss", "pred", "rec", "kmeans", "temporal", "val_pred", "val_rmse",
                  "w_pred", "w_spatial", "w_temporal"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


class CheckpointError(ValueError):
    pass


# --- optimizer ----------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed, ordered set of named parameters."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.params = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))


# --- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def params(self, prefix: str = "param/") -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        blob = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            nb = name.encode("utf-8")
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n: int):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(len(MAGIC))) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
        (blob_len,) = struct.unpack("<Q", take(8))
        try:
            meta = json.loads(bytes(take(blob_len)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt config blob: {exc}") from exc
        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = bytes(take(nlen)).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}Q", take(8 * rank))
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(dims)
            tensors[name] = arr.astype(np.float64)
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
        return cls(meta, tensors)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def model_from_checkpoint(ckpt: Checkpoint) -> SslEkamba:
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    model = build_model(cfg, int(ckpt.meta["d_feat"]), int(ckpt.meta["num_regions"]))
    load_params(model, ckpt.params())
    if "buffer/F" in ckpt.tensors:
        model.F = torch.as_tensor(ckpt.tensors["buffer/F"], dtype=DTYPE).clone()
    return model


def load_params(model: SslEkamba, arrays: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            src = torch.as_tensor(arrays[name], dtype=DTYPE)
            if src.shape != p.shape:
                raise CheckpointError(f"{name}: shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src)


def _arrays(model: SslEkamba) -> dict[str, np.ndarray]:
    return {name: p.detach().numpy().copy() for name, p in model.named_parameters()}


# --- training ---------------------------------------------------------------------


def permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle driven by SplitMix64."""
    rng = SplitMix64(seed)
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


@dataclass
class SplitEval:
    pred_loss: float
    rmse: float
    prediction: np.ndarray  # (S, N) denormalized
    truth: np.ndarray  # (S, N) raw


class Trainer:
    def __init__(self, dataset: Dataset, cfg: RunConfig, adjacency: np.ndarray | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.model = build_model(cfg, dataset.channels, dataset.num_regions)
        if adjacency is None:
            adjacency = grid_adjacency(dataset.grid, cfg.grid.neighborhood)
        self.adj = np.asarray(adjacency, dtype=np.float64)
        self.adj_hat = normalize_adjacency(self.adj)
        self.opt = Adam(self.model.named_parameters(), cfg.train)
        self.magnitude = cfg.augment.scale * dataset.risk_std
        self.epoch = 0
        self.best_val = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.best_params = _arrays(self.model)
        self.best_F = self.model.F.clone()
        self.history: list[dict] = []

    # -- loss weights

    def lambdas(self, epoch: int):
        lc = self.cfg.loss
        base = (lc.pred, lc.spatial, lc.temporal)
        w = [1.0, 1.0, 1.0]
        if lc.dwa and len(self.history) >= 2:
            prev, prev2 = self.history[-1], self.history[-2]
            comps = []
            for i, key in enumerate(("pred", "spatial", "temporal")):
                a = self._component(prev, key)
                b = self._component(prev2, key)
                comps.append(a / b if base[i] > 0 and b > 0 else 1.0)
            z = np.exp(np.array(comps) / lc.dwa_temperature)
            w = list(3.0 * z / z.sum())
        return (base[0] * w[0], base[1] * w[1], base[2] * w[2], lc.kmeans), w

    def _component(self, row: dict, key: str) -> float:
        if key == "spatial":
            return row["rec"] + self.cfg.loss.kmeans * row["kmeans"]
        return row[key]

    # -- epochs

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.cfg.train.patience or self.epoch >= self.cfg.train.max_epochs

    def run_epoch(self) -> dict:
        cfg, ds, model = self.cfg, self.dataset, self.model
        e = self.epoch + 1
        seed = cfg.train.seed
        lambdas, dwa_w = self.lambdas(e)
        order = permutation(len(ds.train), derive(seed, e))
        sums = dict(loss=0.0, pred=0.0, rec=0.0, kmeans=0.0, temporal=0.0)
        gram_sum, gram_n = None, 0
        seen = 0
        model.train()
        for b, start in enumerate(range(0, len(order), cfg.train.batch_size)):
            samples = [ds.train[i] for i in order[start:start + cfg.train.batch_size]]
            x, y_norm, y_raw = ds.batch(samples)
            seeds = [derive(seed, e, b, j) for j in range(len(samples))]
            self.opt.zero_grad()
            out = model.losses(x, y_norm, risk_level_of(y_raw), self.adj, self.adj_hat,
                               seeds, self.magnitude, lambdas)
            if not bool(torch.isfinite(out.total)):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {e}, batch {b}",
                    self._dump(e, b, out),
                )
            out.total.backward()
            try:
                self.opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), self._dump(e, b, out)) from exc
            n = len(samples)
            seen += n
            sums["loss"] += out.total.item() * n
            sums["pred"] += out.pred.item() * n
            sums["rec"] += out.rec.item() * n
            sums["kmeans"] += out.kmeans.item() * n
            sums["temporal"] += out.temporal.item() * n
            if out.gram is not None:
                gram_sum = out.gram * n if gram_sum is None else gram_sum + out.gram * n
                gram_n += n
        if gram_sum is not None:
            model.F = update_cluster_indicator(gram_sum / gram_n, cfg.ssl.clusters, is_gram=True)

        val = self.evaluate("val")
        row = {"epoch": e, **{k: v / seen for k, v in sums.items()},
               "val_pred": val.pred_loss, "val_rmse": val.rmse,
               "w_pred": dwa_w[0], "w_spatial": dwa_w[1], "w_temporal": dwa_w[2]}
        self.history.append(row)
        if val.pred_loss < self.best_val:
            self.best_val = val.pred_loss
            self.best_epoch = e
            self.bad_epochs = 0
            self.best_params = _arrays(model)
            self.best_F = model.F.clone()
        else:
            self.bad_epochs += 1
        self.epoch = e
        log.info("epoch %d loss %.6g pred %.6g val_pred %.6g val_rmse %.6g", e, row["loss"],
                 row["pred"], row["val_pred"], row["val_rmse"])
        return row

    def fit(self, on_epoch: Callable[["Trainer", dict], None] | None = None) -> list[dict]:
        while not self.should_stop:
            row = self.run_epoch()
            if on_epoch is not None:
                on_epoch(self, row)
        return self.history

    @torch.no_grad()
    def evaluate(self, split: str, model: SslEkamba | None = None) -> SplitEval:
        return evaluate_split(model or self.model, self.dataset, split, self.adj_hat,
                              self.cfg.train.batch_size)

    def _dump(self, epoch: int, batch: int, out) -> dict:
        norms = {name: float(p.detach().norm()) for name, p in self.model.named_parameters()}
        return {
            "epoch": epoch,
            "batch": batch,
            "losses": {k: float(getattr(out, k).detach()) for k in ("total", "pred", "rec", "kmeans", "temporal")},
            "param_norms": norms,
            "history": self.history,
        }

    # -- checkpoints

    def checkpoint(self, best: bool = True) -> Checkpoint:
        """``best=True``: parameters of the best epoch; otherwise the live state."""
        ds = self.dataset
        meta = {
            "format_version": FORMAT_VERSION,
            "config": self.cfg.to_dict(),
            "norm_stats": ds.stats.to_dict(),
            "d_feat": ds.channels,
            "num_regions": ds.num_regions,
            "rows": ds.grid.rows,
            "cols": ds.grid.cols,
            "seed": self.cfg.train.seed,
            "epoch": self.epoch,
            "best_epoch": self.best_epoch,
            "best_val": None if math.isinf(self.best_val) else self.best_val,
            "bad_epochs": self.bad_epochs,
            "adam_t": self.opt.t,
            "kind": "best" if best else "state",
            "history": self.history,
        }
        tensors = {}
        params = self.best_params if best else _arrays(self.model)
        F = self.best_F if best else self.model.F
        for name, arr in params.items():
            tensors[f"param/{name}"] = arr
        for name, arr in self.best_params.items():
            tensors[f"best/{name}"] = arr
        for name in self.opt.params:
            tensors[f"adam_m/{name}"] = self.opt.m[name].numpy().copy()
            tensors[f"adam_v/{name}"] = self.opt.v[name].numpy().copy()
        if F.numel():
            tensors["buffer/F"] = F.numpy().copy()
        if self.best_F.numel():
            tensors["best_buffer/F"] = self.best_F.numpy().copy()
        return Checkpoint(meta, tensors)

    @classmethod
    def resume(cls, dataset: Dataset, ckpt: Checkpoint, adjacency: np.ndarray | None = None,
               cfg: RunConfig | None = None) -> "Trainer":
        """Continue from a ``state`` checkpoint; ``cfg`` may override e.g. max_epochs."""
        cfg = cfg or RunConfig.from_dict(ckpt.meta["config"])
        tr = cls(dataset, cfg, adjacency)
        load_params(tr.model, ckpt.params())
        if "buffer/F" in ckpt.tensors:
            tr.model.F = torch.as_tensor(ckpt.tensors["buffer/F"], dtype=DTYPE).clone()
        if "best_buffer/F" in ckpt.tensors:
            tr.best_F = torch.as_tensor(ckpt.tensors["best_buffer/F"], dtype=DTYPE).clone()
        tr.best_params = {k: v.copy() for k, v in ckpt.params("best/").items()}
        for name in tr.opt.params:
            tr.opt.m[name] = torch.as_tensor(ckpt.tensors[f"adam_m/{name}"], dtype=DTYPE).clone()
            tr.opt.v[name] = torch.as_tensor(ckpt.tensors[f"adam_v/{name}"], dtype=DTYPE).clone()
        m = ckpt.meta
        tr.opt.t = int(m["adam_t"])
        tr.epoch = int(m["epoch"])
        tr.best_epoch = int(m["best_epoch"])
        tr.best_val = math.inf if m["best_val"] is None else float(m["best_val"])
        tr.bad_epochs = int(m["bad_epochs"])
        tr.history = copy.deepcopy(m["history"])
        return tr


@torch.no_grad()
def evaluate_split(model: SslEkamba, dataset: Dataset, split: str, adj_hat: torch.Tensor,
                   batch_size: int = 32) -> SplitEval:
    samples = dataset.split(split)
    model.eval()
    preds, raws, losses = [], [], 0.0
    weights = model.cfg.loss.risk_weights
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x, y_norm, y_raw = dataset.batch(chunk)
        p = model.predict(torch.as_tensor(x, dtype=DTYPE), adj_hat)
        losses += weighted_prediction_loss(torch.as_tensor(y_norm), p, weights,
                                           risk_level_of(y_raw)).item() * len(chunk)
        preds.append(p.numpy())
        raws.append(y_raw)
    pred = dataset.stats.denormalize(np.concatenate(preds), channel=0)
    truth = np.concatenate(raws)
    return SplitEval(losses / len(samples), rmse(truth, pred), pred, truth)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    trainer: Trainer


def train(dataset: Dataset, cfg: RunConfig, adjacency: np.ndarray | None = None,
          on_epoch: Callable[[Trainer, dict], None] | None = None) -> TrainResult:
    """Train until early stopping or ``max_epochs``; the model ends at its best epoch."""
    tr = Trainer(dataset, cfg, adjacency)
    tr.fit(on_epoch)
    load_params(tr.model, tr.best_params)
    tr.model.F = tr.best_F.clone()
    return TrainResult(tr.checkpoint(best=True), tr.history, tr)


def write_history_csv(path: Path, history: list[dict]) -> None:
    lines = [",".join(HISTORY_FIELDS)]
    for row in history:
        lines.append(",".join(
            str(row[k]) if k == "epoch" else f"{row[k]:.17g}" for k in HISTORY_FIELDS
        ))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def checkpoint_stats(ckpt: Checkpoint) -> NormStats:
    return NormStats.from_dict(ckpt.meta["norm_stats"])
