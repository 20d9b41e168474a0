"""Time and allocation comparison of the eKAN projection against a naive
per-edge KAN and a plain linear layer, each inside an eKamba block.

Peak allocation is read from the profiler's allocator trace: every
allocation and free is a signed ``[memory]`` event, and the peak is the
maximum of their running sum over one forward+backward pass.
"""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
from torch.profiler import ProfilerActivity, profile

from .config import BenchConfig
from .ekan import EkanStack, SplineGrid, bspline_basis, ekan_forward
from .numerics import DTYPE, silu
from .sssm import EkambaBlock

log = logging.getLogger(__name__)

EQUIV_TOL = 1e-10


class BenchError(RuntimeError):
    pass


def naive_kan_forward(x: torch.Tensor, stack: EkanStack, group: int = 64) -> torch.Tensor:
    """Per-edge KAN evaluation with the same weights as ``stack``.

    Every edge ``(o, i)`` gets its own ``phi_oi(x_i)``: the spline terms are
    materialized as a ``(rows, group, d_in, K)`` tensor for each group of
    output units and only then reduced. Deliberately unoptimized.
    """
    for layer in stack.layers:
        lead = x.shape[:-1]
        rows = x.reshape(-1, layer.d_in)
        K = layer.grid.num_basis
        basis = bspline_basis(rows, layer.grid).unsqueeze(1)  # (R, 1, d_in, K)
        base = silu(rows).unsqueeze(1)  # (R, 1, d_in)
        W_sp = layer.W_spline.reshape(layer.d_out, layer.d_in, K)
        outs = []
        for lo in range(0, layer.d_out, group):
            hi = min(lo + group, layer.d_out)
            edges = basis * W_sp[lo:hi].unsqueeze(0)  # (R, g, d_in, K)
            phi = edges.sum(-1) + base * layer.W_base[lo:hi].unsqueeze(0)  # (R, g, d_in)
            outs.append(phi.sum(-1))
        x = (torch.cat(outs, dim=-1) + layer.b).reshape(*lead, layer.d_out)
    return x


class NaiveKan(nn.Module):
    def __init__(self, stack: EkanStack):
        super().__init__()
        self.stack = stack

    def forward(self, x):
        return naive_kan_forward(x, self.stack)


@dataclass
class VariantStats:
    forward_s: float
    forward_backward_s: float
    peak_bytes: int
    checksum: float


@dataclass
class BenchReport:
    config: BenchConfig
    threads: int
    variants: dict[str, VariantStats] = field(default_factory=dict)

    def ratio(self, metric: str, num: str = "ekan", den: str = "naive_kan") -> float:
        return getattr(self.variants[num], metric) / getattr(self.variants[den], metric)

    def rows(self):
        yield "_meta", "threads", self.threads
        yield "_meta", "repeats", self.config.repeats
        yield "_meta", "warmup", self.config.warmup
        for name, s in self.variants.items():
            yield name, "forward_s", s.forward_s
            yield name, "forward_backward_s", s.forward_backward_s
            yield name, "peak_bytes", s.peak_bytes
            yield name, "checksum", s.checksum
        if "ekan" in self.variants and "naive_kan" in self.variants:
            yield "_ratio", "forward_backward_s", self.ratio("forward_backward_s")
            yield "_ratio", "peak_bytes", self.ratio("peak_bytes")

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "metric", "value"])
            for variant, metric, value in self.rows():
                w.writerow([variant, metric, f"{value:.17g}" if isinstance(value, float) else value])


def peak_bytes(fn) -> int:
    """Peak of live bytes allocated while running ``fn`` (relative to its start)."""
    with profile(activities=[ProfilerActivity.CPU], profile_memory=True) as prof:
        fn()
    events = [e for e in prof.profiler.kineto_results.events() if e.name() == "[memory]"]
    cur = peak = 0
    for e in sorted(events, key=lambda e: e.start_ns()):
        cur += e.nbytes()
        peak = max(peak, cur)
    return peak


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def build_blocks(cfg: BenchConfig) -> dict[str, EkambaBlock]:
    """One block per variant; all share the conv/SSM weights, KAN variants share the stack."""
    grid = SplineGrid(cfg.degree, cfg.num_basis)
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        template = EkambaBlock(cfg.d_model, grid=grid)
        linear = nn.Linear(cfg.d_model, cfg.d_model, dtype=DTYPE)
    finally:
        torch.random.set_rng_state(gen_state)
    projs = {"ekan": template.proj, "naive_kan": NaiveKan(template.proj), "linear": linear}
    blocks = {}
    for name in cfg.variants:
        if name not in projs:
            raise ValueError(f"unknown bench variant {name!r}")
        blk = EkambaBlock(cfg.d_model, grid=grid, proj=projs[name])
        blk.conv = template.conv
        blk.ssm = template.ssm
        blocks[name] = blk
    return blocks


def run_bench(cfg: BenchConfig | None = None, out: Path | None = None) -> BenchReport:
    cfg = cfg or BenchConfig()
    if cfg.repeats < 1:
        raise ValueError("repeats must be >= 1")
    blocks = build_blocks(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn(cfg.batch, cfg.seq_len, cfg.d_model, generator=gen, dtype=DTYPE)

    # a timing of two different computations is meaningless
    if "ekan" in blocks and "naive_kan" in blocks:
        with torch.no_grad():
            h = blocks["ekan"].mix(x)
            err = (ekan_forward(h, blocks["ekan"].proj)
                   - naive_kan_forward(h, blocks["ekan"].proj)).abs().max().item()
        if not err <= EQUIV_TOL:
            raise BenchError(f"eKAN and naive KAN disagree by {err:.3g}")

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    report = BenchReport(cfg, threads=1)
    try:
        for name, blk in blocks.items():
            params = list(blk.parameters())

            def fwd(blk=blk):
                with torch.no_grad():
                    return blk(x)

            def fwd_bwd(blk=blk, params=params):
                for p in params:
                    p.grad = None
                blk(x).sum().backward()

            with torch.no_grad():
                checksum = float(blk(x).sum())
            report.variants[name] = VariantStats(
                forward_s=_median_time(fwd, cfg.repeats, cfg.warmup),
                forward_backward_s=_median_time(fwd_bwd, cfg.repeats, cfg.warmup),
                peak_bytes=peak_bytes(fwd_bwd),
                checksum=checksum,
            )
            log.info("%s: %s", name, report.variants[name])
    finally:
        torch.set_num_threads(threads)
    if out is not None:
        report.write_csv(out)
    return report
