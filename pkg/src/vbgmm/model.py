"""The identity-covariance, equal-weight Gaussian mixture and its closed forms.

Parameter vectors are component-major: ``theta[k*p:(k+1)*p]`` is the mean of
component k, i.e. Vec of the p x K mean matrix taken column by column.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import UsageError
from .numerics import RngStream

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmSpec:
    p: int
    K: int
    true_means: np.ndarray
    prior_variance: float = 1.0

    def __post_init__(self):
        means = np.asarray(self.true_means, dtype=float)
        if self.p < 1 or self.K < 2:
            raise UsageError("need p >= 1 and K >= 2")
        if means.shape != (self.K, self.p):
            raise UsageError(f"true_means must have shape ({self.K}, {self.p})")
        if not np.all(np.isfinite(means)):
            raise UsageError("true_means must be finite")
        if not self.prior_variance > 0:
            raise UsageError("prior_variance must be positive")
        means.setflags(write=False)
        object.__setattr__(self, "true_means", means)

    @classmethod
    def symmetric(cls, p: int, w: float, prior_variance: float = 1.0) -> "GmmSpec":
        """The two-component benchmark with means -w·1_p and +w·1_p."""
        ones = np.ones(p)
        return cls(p, 2, np.stack([-w * ones, w * ones]), prior_variance)

    @property
    def theta_star(self) -> np.ndarray:
        return self.true_means.reshape(-1).copy()


@dataclass
class Dataset:
    observations: np.ndarray
    assignments: np.ndarray | None = None
    seed: tuple | None = None
    spec: GmmSpec | None = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim != 2:
            raise UsageError("observations must be an n x p matrix")
        if not np.all(np.isfinite(obs)):
            raise UsageError("observations must be finite")
        self.observations = obs
        if self.assignments is not None:
            labels = np.asarray(self.assignments, dtype=np.int64)
            if labels.shape != (obs.shape[0],):
                raise UsageError("assignments must have one label per row")
            if obs.shape[0] and (labels.min() < 1 or (self.spec and labels.max() > self.spec.K)):
                raise UsageError("labels must lie in 1..K")
            self.assignments = labels

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def p(self) -> int:
        return self.observations.shape[1]

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["obs_id", "label"] + [f"x_{j + 1}" for j in range(self.p)])
            for i, row in enumerate(self.observations):
                label = "" if self.assignments is None else int(self.assignments[i])
                writer.writerow([i + 1, label] + [f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["obs_id", "label"]:
                raise UsageError("dataset CSV must start with obs_id,label")
            rows = list(reader)
        obs = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), len(header) - 2)
        labels = None
        if rows and all(r[1] != "" for r in rows):
            labels = np.array([int(r[1]) for r in rows])
        return cls(obs, labels)


def sample_dataset(spec: GmmSpec, n: int, rng: RngStream) -> Dataset:
    if n < 1:
        raise UsageError("n must be >= 1")
    labels = rng.gen.integers(0, spec.K, size=n)
    noise = rng.gen.standard_normal((n, spec.p))
    obs = spec.true_means[labels] + noise
    return Dataset(obs, labels + 1, (rng.master_seed, rng.stream_index, *rng.path), spec)


# --------------------------------------------------------------------------
# single-point closed forms
# --------------------------------------------------------------------------


def _as_means(means):
    arr = np.asarray(means, dtype=float)
    if arr.ndim == 1:
        raise UsageError("means must be a K x p array")
    return arr


def responsibilities(means, x) -> np.ndarray:
    mu = _as_means(means)
    logits = -0.5 * ((np.asarray(x, dtype=float) - mu) ** 2).sum(axis=1)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def variational_loglik(means, x) -> float:
    """Per-observation variational log-likelihood; equals the mixture log density."""
    mu = _as_means(means)
    K, p = mu.shape
    e = -0.5 * ((np.asarray(x, dtype=float) - mu) ** 2).sum(axis=1)
    top = e.max()
    return float(-math.log(K) - 0.5 * p * LOG_2PI + top + math.log(np.exp(e - top).sum()))


def grad_variational_loglik(means, x) -> np.ndarray:
    mu = _as_means(means)
    w = responsibilities(mu, x)
    Z = np.asarray(x, dtype=float) - mu            # row k = x - mu_k
    return (w[:, None] * Z).reshape(-1)


def hessian_variational_loglik(means, x) -> np.ndarray:
    """-diag(w)⊗I_p + Σ_{k1<k2} w_k1 w_k2 s sᵀ, s = Vec{Z diag(e_k1 - e_k2)}."""
    mu = _as_means(means)
    K, p = mu.shape
    w = responsibilities(mu, x)
    Z = np.asarray(x, dtype=float) - mu
    H = -np.kron(np.diag(w), np.eye(p))
    for k1 in range(K):
        for k2 in range(k1 + 1, K):
            s = np.zeros((K, p))
            s[k1] = Z[k1]
            s[k2] = -Z[k2]
            s = s.reshape(-1)
            H += w[k1] * w[k2] * np.outer(s, s)
    return H


# --------------------------------------------------------------------------
# variational information matrix
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InformationMatrix:
    by_variance: np.ndarray
    by_hessian: np.ndarray
    mc_samples: int
    score_mean: np.ndarray


def sample_mixture(spec: GmmSpec, size: int, rng: RngStream) -> np.ndarray:
    labels = rng.gen.integers(0, spec.K, size=size)
    return spec.true_means[labels] + rng.gen.standard_normal((size, spec.p))


def information_matrix_mc(spec: GmmSpec, mc_samples: int, rng: RngStream, chunk: int = 50_000):
    if mc_samples < 1000:
        raise UsageError("information_matrix_mc needs at least 1000 samples")
    P = spec.K * spec.p
    gsum = np.zeros(P)
    gouter = np.zeros((P, P))
    hsum = np.zeros((P, P))
    means = np.ascontiguousarray(spec.true_means)
    # fixed-size chunks drawn from one stream: identical result for any worker layout
    done = 0
    while done < mc_samples:
        size = min(chunk, mc_samples - done)
        xs = sample_mixture(spec, size, rng)
        g, go, h = kernels.score_hessian_sums(np.ascontiguousarray(xs), means)
        gsum += g
        gouter += go
        hsum += h
        done += size
    mean = gsum / mc_samples
    by_variance = (gouter - mc_samples * np.outer(mean, mean)) / (mc_samples - 1)
    by_hessian = -hsum / mc_samples
    by_variance = 0.5 * (by_variance + by_variance.T)
    by_hessian = 0.5 * (by_hessian + by_hessian.T)
    return InformationMatrix(by_variance, by_hessian, mc_samples, mean)


def separation_constant(true_means) -> float:
    mu = np.asarray(true_means, dtype=float)
    K, p = mu.shape
    total = 0.0
    for k1 in range(K):
        for k2 in range(k1 + 1, K):
            d2 = float(((mu[k1] - mu[k2]) ** 2).sum())
            # exp(-d2/8) underflows gracefully to 0 for far-apart means
            total += (d2 + 4 * p) / 4.0 * math.exp(-d2 / 8.0)
    return total


def prop3_bounds_check(spec: GmmSpec, info: InformationMatrix) -> dict:
    """Compare the MC information matrix with the separation-based eigenvalue bounds."""
    C = separation_constant(spec.true_means)
    K = spec.K
    lower, upper = (1.0 - C) / K, 1.0 / K
    tol = 3.0 / math.sqrt(info.mc_samples)
    eig = np.linalg.eigvalsh(info.by_hessian)
    diag = np.diag(info.by_hessian)
    applicable = C < 1.0
    inside = bool(
        eig.min() >= lower - tol and eig.max() <= upper + tol
        and diag.min() >= lower - tol and diag.max() <= upper + tol
    )
    return {
        "C": C,
        "lower": lower,
        "upper": upper,
        "tolerance": tol,
        "eigen_range": (float(eig.min()), float(eig.max())),
        "diagonal_range": (float(diag.min()), float(diag.max())),
        "applicable": applicable,
        "satisfied": bool(applicable and inside),
    }
