"""Gaussian tail moments E[||l||^K ; ||l|| > B] for l ~ N(0, I_p)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError, UsageError
from .numerics import RngStream, log_chi_square_survival, log_double_factorial


@dataclass(frozen=True)
class TailQuery:
    p: int
    K: int
    B: float

    def __post_init__(self):
        if self.p < 1 or self.K < 0 or self.B < 0:
            raise UsageError("need p >= 1, K >= 0, B >= 0")

    @property
    def alpha(self) -> float:
        return math.inf if self.B == 0 else (self.p - 1 + self.K) / self.B**2


def log_tail_moment_exact(q: TailQuery) -> float:
    # ||l||² ~ χ²_p and t^{K/2} f_p(t) = 2^{K/2} Γ((p+K)/2)/Γ(p/2) f_{p+K}(t)
    log_scale = 0.5 * q.K * math.log(2.0) + math.lgamma(0.5 * (q.p + q.K)) - math.lgamma(0.5 * q.p)
    return log_scale + log_chi_square_survival(q.p + q.K, q.B**2)


def tail_moment_exact(q: TailQuery) -> float:
    value = log_tail_moment_exact(q)
    if value > 709.0:
        raise NumericalError("tail moment overflows double precision")
    return math.exp(value)


def log_tail_moment_asymptotic(q: TailQuery) -> float:
    if q.B <= 0:
        raise UsageError("the asymptotic form needs B > 0")
    # (-1)!! = 1 covers p = 1
    ldf = 0.0 if q.p < 2 else log_double_factorial(q.p - 2)
    return (q.p - 2 + q.K) * math.log(q.B) - ldf - 0.5 * q.B**2


def tail_moment_asymptotic(q: TailQuery) -> float:
    return math.exp(log_tail_moment_asymptotic(q))


def tail_moment_mc(q: TailQuery, mc_samples: int, rng: RngStream, chunk: int = 100_000):
    """Brute-force estimate; returns (estimate, std_error, informative).

    ``informative`` is False when the exact value is below 1e-8, where the
    sample mean is almost surely zero.
    """
    if mc_samples < 10_000:
        raise UsageError("tail_moment_mc needs at least 10^4 samples")
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < mc_samples:
        size = min(chunk, mc_samples - done)
        r = np.sqrt((rng.gen.standard_normal((size, q.p)) ** 2).sum(axis=1))
        vals = np.where(r > q.B, r**q.K, 0.0)
        total += float(vals.sum())
        total_sq += float((vals**2).sum())
        done += size
    mean = total / mc_samples
    var = max(0.0, (total_sq - mc_samples * mean * mean) / (mc_samples - 1))
    informative = log_tail_moment_exact(q) >= math.log(1e-8)
    return mean, math.sqrt(var / mc_samples), informative


@dataclass(frozen=True)
class ScanRow:
    query: TailQuery
    exact: float
    asymptotic: float
    ratio: float
    alpha: float
    in_hypothesis: bool


def lemma3_ratio_scan(grid, alpha_cap: float):
    """Exact / asymptotic ratio over a grid; returns (rows, envelope).

    ``envelope`` is ``(min_ratio, max_ratio)`` over rows with alpha <= alpha_cap,
    or ``None`` when no row qualifies.
    """
    grid = list(grid)
    if not grid:
        raise UsageError("empty grid")
    rows = []
    for q in grid:
        le = log_tail_moment_exact(q)
        la = log_tail_moment_asymptotic(q)
        rows.append(ScanRow(q, math.exp(le), math.exp(la), math.exp(le - la), q.alpha,
                            q.alpha <= alpha_cap + 1e-12))
    ratios = [r.ratio for r in rows if r.in_hypothesis]
    return rows, ((min(ratios), max(ratios)) if ratios else None)


def fixed_alpha_grid(alpha: float = 0.5, p_values=range(3, 31), K_values=(0, 1, 2)):
    """Queries with B chosen so that (p - 1 + K) / B² equals ``alpha``."""
    return [TailQuery(p, K, math.sqrt((p - 1 + K) / alpha)) for p in p_values for K in K_values]


def write_scan_csv(rows, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p", "K", "B", "alpha", "exact", "asymptotic", "ratio", "in_hypothesis"])
        for r in rows:
            writer.writerow([r.query.p, r.query.K, f"{r.query.B:.17g}", f"{r.alpha:.17g}",
                             f"{r.exact:.17g}", f"{r.asymptotic:.17g}", f"{r.ratio:.17g}",
                             int(r.in_hypothesis)])
