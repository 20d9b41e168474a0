"""Command line entry point: ``ssl-ekamba {synth,train,eval,predict,bench,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import BenchConfig, ConfigError, RunConfig
from .dataio import DataError, WindowConfig, grid_adjacency, load_city, make_dataset, synth_city, write_city
from .graph import normalize_adjacency
from .metrics import evaluate, write_report
from .numerics import DTYPE
from .train import (CheckpointError, TrainingDiverged, checkpoint_stats, evaluate_split,
                    load_checkpoint, model_from_checkpoint, save_checkpoint, train,
                    write_history_csv)

log = logging.getLogger("ssl_ekamba")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

EPILOG = """exit codes:
  0  success
  2  usage error (bad flags or config, non-empty output directory without --force)
  3  I/O error (missing or malformed data, config or checkpoint files)
  4  numeric divergence during training (a dump is written to OUT/diverged.json)
"""


class UsageError(Exception):
    pass


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists():
        if not out.is_dir():
            raise UsageError(f"{out} exists and is not a directory")
        if any(out.iterdir()):
            if not force:
                raise UsageError(f"{out} is not empty (use --force to overwrite)")
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(out: Path, cfg: RunConfig) -> None:
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file {path} not found")
    return RunConfig.load(path)


def dataset_for(data: Path, cfg: RunConfig, stats=None):
    city = load_city(data)
    ds = make_dataset(city.grid, city.features, cfg.window, cfg.data.max_samples, stats=stats)
    return ds, city


# --- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = prepare_out(args.out, args.force)
    city = synth_city(args.seed, args.rows, args.cols, args.slots, args.channels)
    write_city(out, city)
    cfg = RunConfig().replace(
        grid={"rows": args.rows, "cols": args.cols},
        data={"seed": args.seed, "num_slots": args.slots, "channels": args.channels},
    )
    echo_config(out, cfg)
    log.info("wrote %d events to %s", len(city.events), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds, city = dataset_for(args.data, cfg)
    cfg = cfg.replace(grid={"rows": city.grid.rows, "cols": city.grid.cols,
                            "cell_size_km": city.grid.cell_size_km})
    out = prepare_out(args.out, args.force)
    echo_config(out, cfg)

    def report(tr, row):
        log.info("epoch %d loss %.6g val_rmse %.6g", row["epoch"], row["loss"], row["val_rmse"])

    try:
        res = train(ds, cfg, grid_adjacency(ds.grid, cfg.grid.neighborhood), on_epoch=report)
    except TrainingDiverged as exc:
        (out / "diverged.json").write_text(json.dumps(exc.dump, indent=2, default=str) + "\n",
                                           encoding="utf-8")
        raise
    save_checkpoint(out / "checkpoint.bin", res.checkpoint)
    write_history_csv(out / "history.csv", res.history)
    print(f"trained {len(res.history)} epochs, best epoch {res.trainer.best_epoch}, "
          f"checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def _restore(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    cfg = model.cfg
    ds, city = dataset_for(args.data, cfg, stats=checkpoint_stats(ckpt))
    if ds.num_regions != model.num_regions:
        raise DataError(f"data has {ds.num_regions} regions, checkpoint expects {model.num_regions}")
    adj_hat = normalize_adjacency(grid_adjacency(ds.grid, cfg.grid.neighborhood))
    return ckpt, model, cfg, ds, adj_hat


def cmd_eval(args) -> int:
    ckpt, model, cfg, ds, adj_hat = _restore(args)
    k_cfg = args.k if args.k is not None else cfg.metrics.k
    k = min(k_cfg, ds.num_regions)
    if k < k_cfg:
        log.warning("k=%d exceeds %d regions; using k=%d", k_cfg, ds.num_regions, k)
    out = prepare_out(args.out, args.force)
    echo_config(out, cfg.replace(metrics={"k": k}))
    ev = evaluate_split(model, ds, args.split, adj_hat, cfg.train.batch_size)
    report = {"split": args.split, "samples": len(ds.split(args.split)), "k": k}
    report.update(evaluate(ev.truth, ev.prediction, k))
    write_report(out / "report.txt", report)
    for name, value in report.items():
        print(name, value)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt, model, cfg, ds, adj_hat = _restore(args)
    inputs = window_inputs(args.slot, cfg.window, ds.features.shape[0])
    x = torch.as_tensor(ds.features[list(inputs)][None], dtype=DTYPE)
    with torch.no_grad():
        pred = model.predict(x, adj_hat)[0].numpy()
    risk = ds.stats.denormalize(pred, channel=0).reshape(ds.grid.rows, ds.grid.cols)
    out = prepare_out(args.out, args.force)
    echo_config(out, cfg)
    np.savetxt(out / "risk_map.csv", risk, delimiter=",", fmt="%.17g")
    print(f"wrote {ds.grid.rows}x{ds.grid.cols} risk map for slot {args.slot}")
    return EXIT_OK


def window_inputs(slot: int, window: WindowConfig, num_slots: int) -> tuple[int, ...]:
    """Input slots (weekly oldest first, then recent) for predicting ``slot``."""
    first = max(window.weekly * window.slots_per_week, window.recent)
    if not first <= slot <= num_slots:
        raise UsageError(f"slot must lie in [{first}, {num_slots}] for this window")
    weekly = [slot - w * window.slots_per_week for w in range(window.weekly, 0, -1)]
    recent = [slot - r for r in range(window.recent, 0, -1)]
    return tuple(weekly + recent)


def cmd_bench(args) -> int:
    from .bench import run_bench

    cfg = load_config(args.config)
    overrides = {k: v for k, v in (("d_model", args.d_model), ("batch", args.batch),
                                   ("repeats", args.repeats)) if v is not None}
    cfg = cfg.replace(bench=overrides)
    out = prepare_out(args.out, args.force)
    echo_config(out, cfg)
    report = run_bench(cfg.bench, out / "bench.csv")
    for variant, metric, value in report.rows():
        print(variant, metric, value)
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    meta = dict(ckpt.meta)
    history = meta.pop("history", [])
    meta["history_epochs"] = len(history)
    meta["tensors"] = len(ckpt.tensors)
    print(json.dumps(meta, indent=2, sort_keys=True))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssl-ekamba", description=__doc__, epilog=EPILOG,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, epilog=EPILOG,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        return sp

    def out_args(sp):
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="replace a non-empty --out")

    sp = add("synth", cmd_synth, "generate a synthetic city")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--rows", type=positive_int, default=4)
    sp.add_argument("--cols", type=positive_int, default=4)
    sp.add_argument("--slots", type=positive_int, default=2000)
    sp.add_argument("--channels", type=int, choices=(1, 3), default=1)
    out_args(sp)

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--config", type=Path, help="JSON run config (defaults if omitted)")
    sp.add_argument("--data", type=Path, required=True, help="directory written by synth")
    out_args(sp)

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a split")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--k", type=positive_int, help="ranking cutoff (default from config)")
    out_args(sp)

    sp = add("predict", cmd_predict, "predict the risk map for one slot")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--slot", type=int, required=True, help="target slot index")
    out_args(sp)

    sp = add("bench", cmd_bench, "time eKAN against naive KAN and linear projections")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--d-model", type=positive_int)
    sp.add_argument("--batch", type=positive_int)
    sp.add_argument("--repeats", type=positive_int)
    out_args(sp)

    sp = add("inspect", cmd_inspect, "print checkpoint metadata")
    sp.add_argument("--checkpoint", type=Path, required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataError, CheckpointError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
