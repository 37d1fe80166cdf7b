"""Instruments for the variational Bernstein-von Mises checks.

Gaussians here use the rescaled parameterization q(θ) = N(m, diag(v)/n).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError, UsageError
from .kernels import loglik_grad_sum_batch
from .model import Dataset
from .numerics import RngStream

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    m: np.ndarray
    v: np.ndarray
    n_scale: float = 1.0

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=float)).copy()
        v = np.atleast_1d(np.asarray(self.v, dtype=float)).copy()
        if m.shape != v.shape or m.ndim != 1 or m.size < 1:
            raise UsageError("m and v must be vectors of equal length")
        if not np.all(v > 0):
            raise UsageError("variances must be positive")
        if not self.n_scale > 0:
            raise UsageError("n_scale must be positive")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", v)

    @property
    def dim(self) -> int:
        return self.m.size

    @property
    def cov_diag(self) -> np.ndarray:
        return self.v / self.n_scale

    def sample(self, size: int, rng: RngStream) -> np.ndarray:
        return self.m + np.sqrt(self.cov_diag) * rng.gen.standard_normal((size, self.dim))

    def logpdf(self, theta) -> np.ndarray:
        cov = self.cov_diag
        z2 = ((np.atleast_2d(theta) - self.m) ** 2 / cov).sum(axis=1)
        return -0.5 * (z2 + np.log(cov).sum() + self.dim * LOG_2PI)

    def entropy(self) -> float:
        return 0.5 * float(np.log(self.cov_diag).sum()) + 0.5 * self.dim * (1.0 + LOG_2PI)


@dataclass
class DiagnosticsReport:
    delta_n: list
    kl_to_reference: float
    tv_estimate: float
    tv_std_error: float
    tail_mass: float
    tail_radius: float
    underdispersion_ratio: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def kl_diag_gaussians(q1: DiagGaussian, q2: DiagGaussian) -> float:
    """KL(q1 || q2) written in terms of the increments Δm = m2 - m1, Δv = v2 - v1."""
    if q1.dim != q2.dim or q1.n_scale != q2.n_scale:
        raise UsageError("KL needs equal dimension and equal n_scale")
    dm = q2.m - q1.m
    dv = q2.v - q1.v
    v2 = q1.v + dv
    mean_part = 0.5 * q1.n_scale * float((dm**2 / v2).sum())
    var_part = 0.5 * float((-dv / v2 + np.log1p(dv / q1.v)).sum())
    return max(0.0, mean_part + var_part)


def _cholesky(V):
    V = np.asarray(V, dtype=float)
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix is not positive definite") from exc


def delta_n(theta_star, data: Dataset, V) -> np.ndarray:
    """Standardized score shift V⁻¹ ∇M_n(θ*) / √n."""
    theta_star = np.asarray(theta_star, dtype=float)
    means = theta_star.reshape(1, -1, data.p)
    score = loglik_grad_sum_batch(means, data.observations)[1].reshape(-1)
    L = _cholesky(V)
    rhs = score / math.sqrt(data.n)
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


def reference_gaussian(theta_star, delta, V, n: float) -> DiagGaussian:
    diag = np.diag(np.asarray(V, dtype=float))
    if not np.all(diag > 0):
        raise NumericalError("reference Gaussian needs a positive diagonal")
    mean = np.asarray(theta_star, dtype=float) + np.asarray(delta, dtype=float) / math.sqrt(n)
    return DiagGaussian(mean, 1.0 / diag, n)


def tv_monte_carlo(q: DiagGaussian, ref: DiagGaussian, mc_samples: int, rng: RngStream):
    """TV(q, ref) = ½ E_q|1 - ref/q|, sampling from q only."""
    if q.dim != ref.dim:
        raise UsageError("TV needs equal dimensions")
    if mc_samples < 10_000:
        raise UsageError("tv_monte_carlo needs at least 10^4 samples")
    theta = q.sample(mc_samples, rng)
    log_ratio = ref.logpdf(theta) - q.logpdf(theta)
    terms = 0.5 * np.abs(-np.expm1(log_ratio))
    est = float(np.clip(terms.mean(), 0.0, 1.0))
    return est, float(terms.std(ddof=1) / math.sqrt(mc_samples))


def tail_mass_outside_ball(q: DiagGaussian, center, radius: float, mc_samples: int, rng: RngStream):
    if not radius > 0:
        raise UsageError("radius must be positive")
    theta = q.sample(mc_samples, rng)
    outside = (((theta - np.asarray(center, dtype=float)) ** 2).sum(axis=1) > radius**2)
    est = float(outside.mean())
    return est, math.sqrt(est * (1.0 - est) / mc_samples)


def underdispersion_check(V) -> tuple[float, float]:
    """(Π V_ii / det V, entropy of N(0, V⁻¹) minus entropy of N(0, diag⁻¹ V))."""
    L = _cholesky(V)
    logdet = 2.0 * float(np.log(np.diag(L)).sum())
    log_ratio = float(np.log(np.diag(np.asarray(V, dtype=float))).sum()) - logdet
    return math.exp(log_ratio), 0.5 * log_ratio
