"""Analytic parameter and FLOP counts, plus an empirical scaling benchmark.

FLOP convention: one multiply-accumulate is two FLOPs and every bias add is one
FLOP. Elementwise work (layer norms, activations, softmaxes, residual adds,
temperature scaling, mass normalisation) is tallied separately and folded into
the total only when it exceeds ``ELEMENTWISE_THRESHOLD`` of the core count.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .errors import ConfigError
from .model import Aggregator, CaprmilConfig, forward, init_model
from .numerics.rng import Rng
from .numerics.tensor import no_grad

ELEMENTWISE_THRESHOLD = 0.01
MIN_REPEATS = 3

# FLOPs per element for the elementwise primitives
LN_COST = 5
GELU_COST = 1
SOFTMAX_COST = 3
ACT_COST = 1


def params_by_submodule(config: CaprmilConfig) -> dict[str, int]:
    """Closed-form trainable parameter counts per submodule."""
    c = config
    d, dh, h, m = c.d_model, c.head_dim, c.n_heads, c.n_clusters
    inner = h * dh
    block = (
        2 * d                                  # ln1
        + 2 * (d * inner + inner)              # x / f projections
        + dh * m + m + h                       # shared cluster map + temperatures
        + 3 * (dh * dh + dh)                   # shared q, k, v
        + inner * d + d                        # output projection
        + 2 * d                                # ln2
        + 2 * c.mlp_ratio * d * d + c.mlp_ratio * d + d
    )
    agg = 0
    if c.aggregator != Aggregator.MEAN:
        gates = 2 if c.aggregator == Aggregator.GATTN else 1
        agg = gates * (d * c.attn_hidden + c.attn_hidden) + c.attn_hidden + 1
    return {
        "projection": c.d_in * d + d + 2 * d,
        "blocks": c.n_blocks * block,
        "aggregator": agg,
        "classifier": d * c.n_classes + c.n_classes,
    }


def count_params(config: CaprmilConfig) -> int:
    return sum(params_by_submodule(config).values())


@dataclass(frozen=True)
class FlopCount:
    """Forward cost ``a * N + b``; elementwise terms kept apart."""

    a: int
    b: int
    elementwise_a: int
    elementwise_b: int

    def core(self, n: int) -> int:
        return self.a * n + self.b

    def elementwise(self, n: int) -> int:
        return self.elementwise_a * n + self.elementwise_b

    def elementwise_share(self, n: int) -> float:
        return self.elementwise(n) / self.core(n)

    def includes_elementwise(self, n: int) -> bool:
        return self.elementwise_share(n) > ELEMENTWISE_THRESHOLD

    def total(self, n: int) -> int:
        return self.core(n) + (self.elementwise(n) if self.includes_elementwise(n) else 0)


def count_flops(config: CaprmilConfig) -> FlopCount:
    """Eval-mode forward FLOPs for one bag, as affine coefficients in N."""
    c = config
    d, dh, h, m = c.d_model, c.head_dim, c.n_heads, c.n_clusters
    inner = h * dh
    hidden = c.mlp_ratio * d

    # per patch
    a = 2 * c.d_in * d + d
    ea = d * (LN_COST + GELU_COST)
    # N-independent
    b = 0
    eb = 0
    for _ in range(c.n_blocks):
        a += 2 * (2 * d * inner + inner)            # x and f projections
        a += h * (2 * dh * m + m)                   # cluster logits
        a += h * 2 * m * dh                         # token aggregation
        a += h * 2 * m * dh                         # broadcast
        a += 2 * inner * d + d                      # output projection
        a += 2 * d * hidden + hidden + 2 * hidden * d + d
        ea += 2 * d * LN_COST + hidden * GELU_COST + 2 * d * ACT_COST
        ea += h * m * (ACT_COST + SOFTMAX_COST)     # temperature + assignment softmax
        b += h * 3 * (2 * m * dh * dh + m * dh)     # q, k, v
        b += h * 2 * (2 * m * m * dh)               # scores and mixing
        eb += h * (m * dh * ACT_COST + m * m * (ACT_COST + SOFTMAX_COST))
    if c.aggregator == Aggregator.MEAN:
        a += d
        eb += d
    else:
        a += 2 * d * c.attn_hidden + c.attn_hidden
        ea += c.attn_hidden * ACT_COST
        if c.aggregator == Aggregator.GATTN:
            a += 2 * d * c.attn_hidden + c.attn_hidden
            ea += c.attn_hidden * (ACT_COST + 1)
        a += 2 * c.attn_hidden + 1
        a += 2 * d                                  # weighted pooling
        ea += SOFTMAX_COST
    b += 2 * d * c.n_classes + c.n_classes
    return FlopCount(a, b, ea, eb)


def derive_width_depth(params_full: float = 0.314e6, flops_full: float = 0.628e9,
                       params_mean: float = 0.130e6, flops_mean: float = 0.260e9,
                       d_in: int = 1024, n: int = 1000, n_heads: int = 8, n_clusters: int = 4,
                       mlp_ratio: int = 4, n_classes: int = 2) -> tuple[int, int, list[str]]:
    """Recover the hidden width ``D`` and block count ``T`` from reported totals.

    Uses only leading-order closed forms, independently of :func:`count_params`
    and :func:`count_flops`: the mean baseline is dominated by the
    ``d_in x D`` projection, and each block adds roughly
    ``(4 + 2 r) D^2`` weights and twice that in per-patch FLOPs.
    """
    log = [f"targets: params {params_full:.0f} / {params_mean:.0f}, "
           f"GFLOPs@N={n} {flops_full / 1e9:.3f} / {flops_mean / 1e9:.3f}"]
    best = None
    for d in range(n_heads, 513, n_heads):
        p_mean = d_in * d + 3 * d + d * n_classes + n_classes
        f_mean = n * (2 * d_in * d + 2 * d)
        err = abs(p_mean - params_mean) / params_mean + abs(f_mean - flops_mean) / flops_mean
        if best is None or err < best[1]:
            best = (d, err, p_mean, f_mean)
    d, _, p_mean, f_mean = best
    log.append(f"D: baseline closed form d_in*D+3D+C*D+C = {p_mean}, 2*N*(d_in+1)*D = {f_mean / 1e9:.4f}G -> D={d}")
    dh = d // n_heads
    block_p = (4 + 2 * mlp_ratio) * d * d + 3 * dh * dh
    block_f = n * 2 * (4 + 2 * mlp_ratio) * d * d
    t_from_p = (params_full - params_mean) / block_p
    t_from_f = (flops_full - flops_mean) / block_f
    t = round((t_from_p + t_from_f) / 2)
    log.append(f"T: param gap / {block_p} per block = {t_from_p:.3f}; "
               f"FLOP gap / {block_f} per block = {t_from_f:.3f} -> T={t}")
    return d, t, log


@dataclass
class CostReport:
    config: CaprmilConfig
    params: int
    flops: FlopCount
    params_by_submodule: dict[str, int] = field(default_factory=dict)
    n_list: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    repeats: int = 0
    threads: int = 0
    slope: float = math.nan
    intercept: float = math.nan
    r2: float = math.nan

    def table(self, n: int = 1000) -> str:
        lines = [
            f"params          {self.params} ({self.params / 1e6:.4f}M)",
            *(f"  {k:<14}{v}" for k, v in self.params_by_submodule.items()),
            f"flops(N={n})     {self.flops.total(n)} ({self.flops.total(n) / 1e9:.4f}G)",
            f"flops affine    a={self.flops.a} b={self.flops.b}",
            f"elementwise     {self.flops.elementwise_share(n) * 100:.2f}% of core "
            f"({'included' if self.flops.includes_elementwise(n) else 'excluded'})",
        ]
        if self.n_list:
            lines.append(f"timing          repeats={self.repeats} threads={self.threads}")
            lines.append(f"{'N':>8}  {'median_s':>10}  {'gflops':>8}")
            for nn, s in zip(self.n_list, self.seconds):
                lines.append(f"{nn:>8}  {s:>10.5f}  {self.flops.total(nn) / 1e9:>8.3f}")
            lines.append(f"fit             t = {self.slope:.3e}*N + {self.intercept:.3e}  R2={self.r2:.5f}")
            lines.append(f"t(max)/t(min)   {self.seconds[-1] / self.seconds[0]:.2f}")
        return "\n".join(lines)

    def csv(self) -> str:
        rows = ["N,median_seconds,analytic_flops"]
        rows += [f"{n},{s:.6f},{self.flops.total(n)}" for n, s in zip(self.n_list, self.seconds)]
        return "\n".join(rows) + "\n"


def cost_report(config: CaprmilConfig) -> CostReport:
    parts = params_by_submodule(config)
    return CostReport(config, sum(parts.values()), count_flops(config), parts)


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def _blas_threads() -> int:
    counts = [i.get("num_threads", 1) for i in threadpool_info() if i.get("user_api") == "blas"]
    return max(counts) if counts else 1


def bench_scaling(config: CaprmilConfig, n_list: Sequence[int], repeats: int = MIN_REPEATS,
                  threads: int | None = 1, seed: int = 0) -> CostReport:
    """Median eval-mode forward time per bag size, with a linear fit.

    ``threads=None`` leaves the BLAS thread pool untouched.
    """
    n_list = [int(n) for n in n_list]
    if repeats < MIN_REPEATS:
        raise ConfigError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    if not n_list or any(n < 1 for n in n_list) or n_list != sorted(set(n_list)):
        raise ConfigError("n_list must be a non-empty strictly ascending list of positive sizes")
    report = cost_report(config)
    rng = Rng(seed)
    state = init_model(config, rng.spawn("init"))
    x_all = rng.spawn("bench").normal((n_list[-1], config.d_in), dtype=np.float32)

    def run():
        with no_grad():
            for n in n_list:
                x = x_all[:n]
                forward(x, state)  # warm-up
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    forward(x, state)
                    times.append(time.perf_counter() - t0)
                report.seconds.append(statistics.median(times))

    if threads is None:
        run()
    else:
        with threadpool_limits(limits=threads):
            run()
    report.threads = threads if threads is not None else _blas_threads()
    report.n_list = n_list
    report.repeats = repeats
    report.slope, report.intercept, report.r2 = linear_fit(n_list, report.seconds)
    return report
