"""Deployability scoring and efficiency measurement.

The composite score is 20*log10(a^2 / (sqrt(p*m) * (t*r)^(delta/4))) with
a = accuracy in percent, p = parameters in millions, m = FLOPs in billions,
t = latency in milliseconds, r = peak memory in megabytes. delta=0 ignores
the runtime terms, delta=1 includes them. The unit convention is normative:
it reproduces the published score tables to the printed precision.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass

import numpy as np

from .tensor import alloc_stats


@dataclass
class EfficiencyRecord:
    name: str
    a: float                 # accuracy, percent
    p: float                 # parameters, millions
    m: float                 # FLOPs, billions
    t: float | None = None   # latency, ms
    r: float | None = None   # peak memory, MB


@dataclass
class BenchConfig:
    warmup_iters: int = 10
    timed_iters: int = 100
    batch: int = 8
    n_points: int = 1024

    def __post_init__(self):
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be at least 1")
        if self.timed_iters < 10:
            raise ValueError("timed_iters must be at least 10")


def netscore(rec: EfficiencyRecord, delta: int = 0) -> float:
    """Evaluate the composite score; delta=1 adds the latency/memory term."""
    if delta not in (0, 1):
        raise ValueError("delta must be 0 or 1")
    if not 0.0 < rec.a <= 100.0:
        raise ValueError(f"accuracy must be in (0, 100], got {rec.a}")
    if rec.p <= 0 or rec.m <= 0:
        raise ValueError("parameter and FLOP counts must be positive")
    denom = math.sqrt(rec.p * rec.m)
    if delta == 1:
        if rec.t is None or rec.r is None or rec.t <= 0 or rec.r <= 0:
            raise ValueError("latency and memory must be positive for delta=1")
        denom *= (rec.t * rec.r) ** 0.25
    return 20.0 * math.log10(rec.a * rec.a / denom)


def count_params(model) -> int:
    """Trainable scalars: every Param entry; BN running stats excluded."""
    return int(sum(p.value.size for p in model.params()))


def estimate_flops(model, n_points: int | None = None, batch: int = 1,
                   include_search: bool = False) -> float:
    """Analytic FLOP count for one forward pass.

    Layer conventions (1 MAC = 2 FLOPs, comparisons counted): linear
    2*n*in*out, batch norm 4*n*c, relu n*c, max over K neighbors n*K*c,
    channel affine 2*n*c, grid embedding 3*M*N*10. Neighborhood search costs
    (kNN 8*Q*N, FPS 4*N*m per call) are off by default to match how the
    published counts were produced (layer counters do not see index math);
    include_search=True adds them.
    """
    cfg = model.config
    n = n_points if n_points is not None else cfg.n_points
    total = 0.0
    search = 0.0

    if cfg.embedding == "mlp":
        total += 2 * n * 3 * cfg.d + n * cfg.d
    else:
        total += 3 * model.nape_cfg.grid_size * n * 10
    if cfg.gmu_placement in ("after_embedding", "both"):
        total += 2 * n * cfg.d

    widths = cfg.widths
    points = cfg.stage_points
    in_ch = cfg.d
    n_prev = n
    for s in range(4):
        m, w, depth = points[s], widths[s], cfg.stage_depths[s]
        rows = m * cfg.k
        rc = round(w * cfg.lrb_ratio)
        search += 4 * n_prev * m           # FPS distance updates
        search += 8 * m * n_prev           # kNN pairwise distances
        if cfg.gmu_placement in ("after_grouping", "both"):
            total += 2 * rows * (in_ch + 3)
        total += 2 * rows * (in_ch + 3) * w + 4 * rows * w + rows * w
        total += depth * (4 * rows * w * rc + 4 * rows * rc + rows * (rc + w))
        total += m * cfg.k * w             # neighbor max-pool
        in_ch, n_prev = w, m
    total += points[3] * widths[3]         # global max-pool

    if cfg.head == "classify":
        hidden = cfg.head_hidden or 4 * widths[3]
        total += 2 * widths[3] * hidden + hidden + 2 * hidden * cfg.n_classes
    else:
        level_channels = [cfg.d] + widths
        level_points = [n] + points
        fp_out = [widths[2], widths[2], widths[1], widths[1]]
        coarse = widths[3]
        for i, fine_level in enumerate((3, 2, 1, 0)):
            nf = level_points[fine_level]
            search += 8 * nf * level_points[fine_level + 1]
            total += nf * 3 * (2 * coarse + 4)                     # IDW apply
            cin = coarse + level_channels[fine_level]
            total += 2 * nf * cin * fp_out[i] + 4 * nf * fp_out[i] + nf * fp_out[i]
            total += 2 * nf * fp_out[i] * fp_out[i] + 4 * nf * fp_out[i] + nf * fp_out[i]
            coarse = fp_out[i]
        total += sum(lp * lc for lp, lc in zip(level_points, level_channels))
        ncat = cfg.n_categories
        total += 2 * ncat * cfg.class_embed_dim
        fused = fp_out[-1] + sum(level_channels) + cfg.class_embed_dim
        hidden = widths[2]
        total += 2 * n * fused * hidden + 4 * n * hidden + n * hidden
        total += 2 * n * hidden * cfg.seg_parts

    if include_search:
        total += search
    return float(total * batch)


_BENCH_LOCK = threading.Lock()


def measure_latency(model, cfg: BenchConfig) -> float:
    """Mean wall-clock milliseconds per sample over a fixed random batch."""
    rng = np.random.default_rng(0)
    batch = rng.standard_normal((cfg.batch, cfg.n_points, 3)).astype(np.float32)
    batch /= np.abs(batch).max()
    was_training = model.training
    model.eval()
    try:
        with _BENCH_LOCK:
            for _ in range(cfg.warmup_iters):
                model.forward(batch, sample_seed=0)
            start = time.perf_counter()
            for _ in range(cfg.timed_iters):
                model.forward(batch, sample_seed=0)
            elapsed = time.perf_counter() - start
    finally:
        model.train(was_training)
    return elapsed / cfg.timed_iters / cfg.batch * 1000.0


def measure_peak_memory(model, cfg: BenchConfig) -> float:
    """High-water mark of tracked tensor allocations over one forward, MB."""
    import gc

    was_training = model.training
    model.eval()
    try:
        with _BENCH_LOCK:
            gc.collect()
            alloc_stats.reset_peak()
            baseline = alloc_stats.current_bytes
            rng = np.random.default_rng(0)
            batch = rng.standard_normal((cfg.batch, cfg.n_points, 3)).astype(np.float32)
            batch /= np.abs(batch).max()
            model.forward(batch, sample_seed=0)
            peak = alloc_stats.peak_bytes
    finally:
        model.train(was_training)
    return (peak - baseline) / 1e6


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks on ties; nan for constant input."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("need at least two observations")
    rx, ry = _average_ranks(x), _average_ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return float("nan")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks
