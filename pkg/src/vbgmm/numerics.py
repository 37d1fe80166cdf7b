"""Seeded randomness, special functions and small statistical utilities."""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, UsageError

# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(master_seed, stream_index)``.

    Backed by numpy's ``SeedSequence`` spawn tree, so distinct indices give
    independent PCG64 streams. ``derive`` extends the spawn key for nested
    sub-streams (e.g. one per restart inside a replication).
    """

    master_seed: int
    stream_index: int = 0
    path: tuple = ()
    gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise UsageError("master_seed must be a 64-bit unsigned integer")
        if self.stream_index < 0:
            raise UsageError("stream_index must be non-negative")
        seq = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(self.stream_index, *self.path)
        )
        object.__setattr__(self, "gen", np.random.Generator(np.random.PCG64(seq)))

    def derive(self, index: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_index, (*self.path, int(index)))


def stable_index(*parts) -> int:
    """Deterministic 63-bit index from a tuple of labels (independent of PYTHONHASHSEED)."""
    text = "|".join(repr(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little") >> 1


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryStat:
    count: int
    mean: float
    sd: float

    @classmethod
    def of(cls, values) -> "SummaryStat":
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            raise UsageError("cannot summarize an empty sample")
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return cls(int(arr.size), float(arr.mean()), sd)


# --------------------------------------------------------------------------
# special functions
# --------------------------------------------------------------------------


def log_sum_exp(values) -> float:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise UsageError("log_sum_exp of an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise UsageError("log_sum_exp requires finite values")
    top = arr.max()
    return float(top + math.log(np.exp(arr - top).sum()))


def log_double_factorial(n: int) -> float:
    if n < 0:
        raise UsageError("double factorial is defined here for n >= 0")
    if n <= 1:
        return 0.0
    if n % 2 == 0:
        k = n // 2
        return k * math.log(2.0) + math.lgamma(k + 1)
    # n = 2k - 1  ->  (2k)! / (2^k k!)
    k = (n + 1) // 2
    return math.lgamma(2 * k + 1) - k * math.log(2.0) - math.lgamma(k + 1)


def double_factorial(n: int) -> float:
    """n!! as a float; exact product up to 150, log-domain beyond."""
    if n < 0:
        raise UsageError("double factorial is defined here for n >= 0")
    if n <= 150:
        out = 1
        for k in range(n, 1, -2):
            out *= k
        return float(out)
    return math.exp(log_double_factorial(n))


_GAMMA_EPS = 1e-16
_GAMMA_MAXIT = 100_000
_TINY = 1e-300


def _lower_gamma_series(a, x):
    # P(a, x) by the power series; converges fastest for x < a + 1
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_GAMMA_MAXIT):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise NumericalError("incomplete gamma series did not converge")


def _upper_gamma_cf(a, x):
    # Q(a, x) by the modified Lentz continued fraction; for x >= a + 1
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAXIT):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise NumericalError("incomplete gamma continued fraction did not converge")


def regularized_upper_gamma(a: float, x: float) -> float:
    if not (math.isfinite(a) and math.isfinite(x)):
        raise UsageError("incomplete gamma arguments must be finite")
    if a <= 0 or x < 0:
        raise UsageError("need a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _lower_gamma_series(a, x))
    return min(1.0, _upper_gamma_cf(a, x))


def chi_square_survival(dof: float, x: float) -> float:
    """P(χ²_dof > x)."""
    if not (math.isfinite(dof) and math.isfinite(x)):
        raise UsageError("chi-square survival arguments must be finite")
    if dof <= 0 or x < 0:
        raise UsageError("need dof > 0 and x >= 0")
    return regularized_upper_gamma(0.5 * dof, 0.5 * x)


def log_chi_square_survival(dof: float, x: float) -> float:
    """log P(χ²_dof > x), accurate deep in the tail where the survival underflows."""
    if dof <= 0 or x < 0:
        raise UsageError("need dof > 0 and x >= 0")
    a, hx = 0.5 * dof, 0.5 * x
    if hx == 0:
        return 0.0
    if hx < a + 1.0:
        return math.log(max(1.0 - _lower_gamma_series(a, hx), _TINY))
    # reuse the continued fraction but keep the prefactor in log space
    b = hx + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAXIT):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            return -hx + a * math.log(hx) - math.lgamma(a) + math.log(h)
    raise NumericalError("incomplete gamma continued fraction did not converge")


def std_normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# --------------------------------------------------------------------------
# Kolmogorov-Smirnov against N(0, 1)
# --------------------------------------------------------------------------


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """Asymptotic P(√n D_n > lam), 2 Σ (-1)^{k-1} exp(-2 k² lam²)."""
    if lam <= 0:
        return 1.0
    if lam < 0.3:
        # the alternating series is useless this close to zero; the
        # theta-function form of the CDF converges in a handful of terms
        s = sum(
            math.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * lam * lam))
            for k in range(1, terms + 1)
        )
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s))
    s = 0.0
    for k in range(1, terms + 1):
        s += (-1) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
    return min(1.0, max(0.0, 2.0 * s))


def ks_statistic_vs_std_normal(samples) -> tuple[float, float]:
    arr = np.sort(np.asarray(samples, dtype=float).ravel())
    n = arr.size
    if n < 20:
        raise UsageError("KS test needs at least 20 samples")
    cdf = np.array([std_normal_cdf(v) for v in arr])
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - cdf)
    d_minus = np.max(cdf - (i - 1) / n)
    stat = float(max(d_plus, d_minus))
    return stat, kolmogorov_sf(math.sqrt(n) * stat)


# --------------------------------------------------------------------------
# label alignment
# --------------------------------------------------------------------------


def best_permutation_alignment(estimated, reference) -> tuple[tuple[int, ...], float]:
    """Permutation π minimizing Σ_k ||estimated_k - reference_π(k)||².

    Exhaustive over K! permutations (K <= 8); ties resolve to the
    lexicographically smallest permutation.
    """
    est = np.asarray(estimated, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.ndim != 2 or est.shape != ref.shape:
        raise UsageError(f"shape mismatch: {est.shape} vs {ref.shape}")
    K = est.shape[0]
    if K > 8:
        raise UsageError("exhaustive alignment supports K <= 8")
    cost = ((est[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    best, best_err = None, math.inf
    for perm in itertools.permutations(range(K)):
        err = float(sum(cost[k, perm[k]] for k in range(K)))
        if err < best_err:
            best, best_err = perm, err
    return best, best_err


def align_to_reference(estimated, reference):
    """Reorder ``estimated`` rows so row k is matched to reference row k."""
    perm, _ = best_permutation_alignment(estimated, reference)
    est = np.asarray(estimated)
    out = np.empty_like(est)
    for k, j in enumerate(perm):
        out[j] = est[k]
    return out, perm
