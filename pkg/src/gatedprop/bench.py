"""Forward-time microbenchmarks of the propagation blocks.

Each case times one layer forward (or a single propagation site) on
random inputs at a fixed seed, pinned to one BLAS thread when possible.
Reported value is the median over the repetitions after warmup; the MAC
count of the attention stages (exact, platform independent) is attached
to every row. Wall times are never asserted here, only reported.
"""

from __future__ import annotations

import csv
import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import ops
from .config import EngineConfig
from .errors import ConfigError
from .propagation import (BranchState, GpmLayer, KeySource, LsttLayer, lt_propagate,
                          self_propagate, st_propagate)
from .tensor import Tensor, no_grad

SITES = ("full", "lt", "st", "self")


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except Exception:
        return nullcontext()


@dataclass
class BenchCase:
    block: str                      # "gpm" or "lstt"
    heads: int = 1
    frames: int = 2                 # T: memorized frames for long-term keys
    h: int = 30
    w: int = 30
    channels: int = 256
    match_dim: int = 128
    prop_dim: int = 512
    window: int = 15
    repetitions: int = 10
    warmup: int = 3
    site: str = "full"

    def validate(self):
        if self.block not in ("gpm", "lstt"):
            raise ConfigError(f"block must be gpm or lstt, got {self.block!r}")
        if self.site not in SITES:
            raise ConfigError(f"site must be one of {SITES}, got {self.site!r}")
        if self.repetitions < 10 or self.warmup < 3:
            raise ConfigError("benchmark needs >= 10 repetitions after >= 3 warmup runs")
        return self

    @property
    def label(self):
        base = self.block if self.site == "full" else f"{self.block}:{self.site}"
        return f"{base} h{self.heads} T{self.frames} {self.h}x{self.w}"


@dataclass
class BenchRow:
    case: BenchCase
    median_ns: int
    macs: int

    def csv_fields(self):
        c = self.case
        block = c.block if c.site == "full" else f"{c.block}:{c.site}"
        return [block, c.heads, c.frames, c.h, c.w, c.channels, c.match_dim, c.prop_dim,
                self.median_ns, self.macs]


CSV_HEADER = ["block", "heads", "T", "H", "W", "C", "Ck", "Cv", "median_ns", "macs"]


def _case_config(case: BenchCase) -> EngineConfig:
    return EngineConfig(layers=1, channels=case.channels, match_dim=case.match_dim,
                        prop_dim=case.prop_dim, window=case.window, dw_kernel=5,
                        heads=case.heads, decouple=case.block == "gpm",
                        stride=1).validate()


def _window_macs(case: BenchCase, branches: int):
    """Exact in-bounds key counts of the short-term window attention."""
    _, valid = ops.window_index(case.h, case.w, min(case.window, 2 * max(case.h, case.w) - 1))
    keys = int(valid.sum())
    return keys * case.match_dim, branches * keys * case.prop_dim, case.heads * keys


def case_macs(case: BenchCase) -> int:
    """Attention MACs (correlation + value aggregation) of the timed scope."""
    from .propagation import attention_flops

    cfg = _case_config(case)
    branches = 2 if case.block == "gpm" else 1
    n = case.h * case.w
    lt = attention_flops(cfg, case.frames, case.h, case.w, case.heads)
    self_cost = attention_flops(cfg, 1, case.h, case.w, case.heads)
    st_corr, st_agg, _ = _window_macs(case, branches)
    per_site = {
        "lt": lt.macs if case.frames > 0 else 0,
        "self": self_cost.macs,
        "st": st_corr + st_agg,
    }
    if case.site == "full":
        return sum(per_site.values())
    return per_site[case.site]


def _build_runner(case: BenchCase, seed=0):
    cfg = _case_config(case)
    rng = np.random.default_rng(seed)
    n = case.h * case.w
    c, cv = case.channels, case.prop_dim

    def t(shape):
        return Tensor((rng.standard_normal(shape) * 0.5).astype(np.float32))

    state = BranchState(t((n, c)), t((n, c)) if cfg.decouple else None, 0, case.frames + 1)
    mem = None
    if case.frames > 0:
        m = case.frames * n
        mem = KeySource(t((m, c)), t((m, c)) if cfg.decouple else None, t((m, cv)),
                        tuple(range(1, case.frames + 1)))
    prev = KeySource(t((n, c)), t((n, c)) if cfg.decouple else None, t((n, cv)),
                     (case.frames,))
    spatial = (case.h, case.w)
    if case.block == "gpm":
        layer = GpmLayer.create(cfg, rng, dtype="f32")
        runners = {
            "full": lambda: layer.forward(state, mem, prev, cfg, spatial),
            "lt": (lambda: lt_propagate(state, mem, layer.site_lt, cfg, spatial))
            if mem is not None else (lambda: state),
            "st": lambda: st_propagate(state, prev, layer.site_st, cfg, spatial),
            "self": lambda: self_propagate(state, layer.site_self, cfg, spatial),
        }
    else:
        layer = LsttLayer.create(cfg, rng, dtype="f32")
        x = state.visual
        runners = {
            "full": lambda: layer.forward(state, mem, prev, cfg, spatial),
            "lt": lambda: layer.lt_site(x, mem, cfg),
            "st": lambda: layer.st_site(x, prev, cfg, spatial),
            "self": lambda: layer.self_site(x, cfg),
        }
    return runners[case.site]


def time_case(case: BenchCase, seed=0) -> BenchRow:
    """Median forward wall time of one case; repetitions double automatically
    while the measurement sits too close to the timer resolution."""
    case.validate()
    run = _build_runner(case, seed)
    resolution = time.get_clock_info("perf_counter").resolution
    reps = case.repetitions
    with _single_thread(), no_grad():
        for _ in range(case.warmup):
            run()
        while True:
            samples = []
            for _ in range(reps):
                t0 = time.perf_counter()
                run()
                samples.append(time.perf_counter() - t0)
            median = float(np.median(samples))
            if median > 100 * resolution or reps >= 640:
                break
            reps *= 2
    return BenchRow(case, int(median * 1e9), case_macs(case))


def time_pair(case_a: BenchCase, case_b: BenchCase, seed=0):
    """Interleaved timing of two cases for a drift-free comparison: each
    repetition samples both runners back to back, so ambient load moves
    both medians together."""
    case_a.validate()
    case_b.validate()
    run_a = _build_runner(case_a, seed)
    run_b = _build_runner(case_b, seed)
    samples_a, samples_b = [], []
    with _single_thread(), no_grad():
        for _ in range(max(case_a.warmup, case_b.warmup)):
            run_a()
            run_b()
        for _ in range(max(case_a.repetitions, case_b.repetitions)):
            t0 = time.perf_counter()
            run_a()
            t1 = time.perf_counter()
            run_b()
            t2 = time.perf_counter()
            samples_a.append(t1 - t0)
            samples_b.append(t2 - t1)
    return (BenchRow(case_a, int(np.median(samples_a) * 1e9), case_macs(case_a)),
            BenchRow(case_b, int(np.median(samples_b) * 1e9), case_macs(case_b)))


def run_bench(cases, seed=0, progress=None) -> list:
    rows = []
    for case in cases:
        row = time_case(case, seed=seed)
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow(row.csv_fields())


def default_cases(quick=False) -> list:
    """The standard comparison matrix: decoupled single-head layer vs the
    8-head coupled baseline, head-count scaling, and long-term cost vs T."""
    if quick:
        dims = dict(h=12, w=12, channels=32, match_dim=16, prop_dim=64, window=7)
        scaling = dict(dims, h=16, w=16)
    else:
        dims = dict(h=30, w=30, channels=256, match_dim=128, prop_dim=512, window=15)
        # the linear-in-T term should dominate the fixed projections, so the
        # scaling rows use a larger grid
        scaling = dict(dims, h=36, w=36)
    cases = [
        BenchCase("gpm", heads=1, frames=2, **dims),
        BenchCase("lstt", heads=8, frames=2, **dims),
        BenchCase("lstt", heads=1, frames=2, **dims),
        BenchCase("lstt", heads=4, frames=2, **dims),
        BenchCase("gpm", heads=1, frames=2, site="lt", **scaling),
        BenchCase("gpm", heads=1, frames=4, site="lt", **scaling),
        BenchCase("lstt", heads=8, frames=2, site="lt", **scaling),
        BenchCase("lstt", heads=8, frames=4, site="lt", **scaling),
        BenchCase("gpm", heads=1, frames=0, site="lt", **dims),
    ]
    return cases
