"""Coordinate-ascent VI for the two-component mixture, its ELBO and the MSE metric."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import NumericalError, UsageError
from .model import LOG_2PI, Dataset, GmmSpec
from .numerics import RngStream, best_permutation_alignment

DATA_INIT = "data"
TRUTH_INIT = "truth"
INIT_POLICIES = (DATA_INIT, TRUTH_INIT)


@dataclass
class VariationalState:
    """Mean-field parameters: means ``m`` (K, p), diagonal covariances ``d`` (K, p), ``phi`` (n, K)."""

    m: np.ndarray
    d: np.ndarray
    phi: np.ndarray

    def copy(self) -> "VariationalState":
        return VariationalState(self.m.copy(), self.d.copy(), self.phi.copy())

    def swapped(self, order) -> "VariationalState":
        order = list(order)
        return VariationalState(self.m[order].copy(), self.d[order].copy(), self.phi[:, order].copy())


@dataclass
class FitResult:
    state: VariationalState
    elbo_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    seed: tuple | None = None

    @property
    def final_elbo(self) -> float:
        return self.elbo_trace[-1]

    def summary(self, spec: GmmSpec | None = None) -> dict:
        out = {
            "iterations": self.iterations,
            "converged": self.converged,
            "mse": mse(self.state.m, spec) if spec is not None else None,
            "final_elbo": self.final_elbo,
            "seed": list(self.seed) if self.seed is not None else None,
        }
        return out

    def export(self, directory, spec: GmmSpec | None = None, stem: str = "fit"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / f"{stem}_trace.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sweep", "elbo"])
            for t, value in enumerate(self.elbo_trace, start=1):
                writer.writerow([t, f"{value:.17g}"])
        (directory / f"{stem}_summary.json").write_text(
            json.dumps(self.summary(spec), indent=2, sort_keys=True) + "\n"
        )


def _check_two_components(state: VariationalState, data: Dataset):
    if state.m.shape[0] != 2:
        raise UsageError("CAVI is implemented for K = 2 components")
    if state.m.shape[1] != data.p:
        raise UsageError("state and data dimensions differ")


def phi_update(state: VariationalState, data: Dataset) -> np.ndarray:
    """Optimal responsibilities given the current Gaussian factors (log domain)."""
    offset = -0.5 * ((state.m**2).sum(axis=1) + state.d.sum(axis=1))
    logits = data.observations @ state.m.T + offset
    top = logits.max(axis=1, keepdims=True)
    lse = top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True))
    return np.exp(logits - lse)


def cavi_update(state: VariationalState, data: Dataset, sigma2: float) -> VariationalState:
    """One sweep: all φ from the previous (m, D), then m and D from the new φ."""
    _check_two_components(state, data)
    x = np.ascontiguousarray(data.observations)
    phi, m_new, d_scalar = kernels.cavi_sweep(
        x, np.ascontiguousarray(state.m), state.d.sum(axis=1), float(sigma2)
    )
    d_new = np.repeat(d_scalar[:, None], data.p, axis=1)
    return VariationalState(m_new, d_new, phi)


def _xlogx(phi):
    out = np.zeros_like(phi)
    pos = phi > 0
    out[pos] = phi[pos] * np.log(phi[pos])
    return out


def elbo_closed_form(state: VariationalState, data: Dataset, sigma2: float) -> float:
    m, d, phi = state.m, state.d, state.phi
    K, p = m.shape
    n = data.n
    x = data.observations
    prior_and_entropy = (
        0.5 * np.log(d).sum()
        - ((d.sum(axis=1) + (m**2).sum(axis=1)).sum()) / (2.0 * sigma2)
        + K * p / 2.0
        - K * p / 2.0 * math.log(sigma2)
    )
    sq = ((x[:, None, :] - m[None, :, :]) ** 2).sum(axis=2)     # (n, K)
    fit = -0.5 * (phi * (sq + d.sum(axis=1)[None, :])).sum()
    entropy_c = -_xlogx(phi).sum()
    return float(prior_and_entropy + fit + entropy_c - n * math.log(K) - n * p / 2.0 * LOG_2PI)


def elbo_monte_carlo(
    state: VariationalState, data: Dataset, sigma2: float, mc_samples: int, rng: RngStream,
    chunk: int = 500,
) -> tuple[float, float]:
    """E_q[log p(μ, c, x) - log q(μ, c)] by direct sampling from q."""
    if mc_samples < 1000:
        raise UsageError("elbo_monte_carlo needs at least 1000 samples")
    m, d, phi = state.m, state.d, state.phi
    K, p = m.shape
    x = data.observations
    n = data.n
    cum = np.cumsum(phi, axis=1)
    values = np.empty(mc_samples)
    done = 0
    while done < mc_samples:
        S = min(chunk, mc_samples - done)
        eps = rng.gen.standard_normal((S, K, p))
        mu = m[None] + np.sqrt(d)[None] * eps
        u = rng.gen.random((S, n, 1))
        c = np.minimum((u > cum[None]).sum(axis=2), K - 1)        # (S, n)
        log_prior = (-0.5 * (mu**2).sum(axis=(1, 2)) / sigma2
                     - K * p / 2.0 * (LOG_2PI + math.log(sigma2)))
        log_q_mu = (-0.5 * (eps**2).sum(axis=(1, 2))
                    - 0.5 * np.log(d).sum() - K * p / 2.0 * LOG_2PI)
        picked = np.take_along_axis(mu, c[:, :, None], axis=1)     # mu[s, c[s, i]]
        resid = x[None] - picked
        log_lik = (-0.5 * (resid**2).sum(axis=(1, 2)) - n * p / 2.0 * LOG_2PI - n * math.log(K))
        with np.errstate(divide="ignore"):
            log_phi = np.log(phi)
        log_q_c = log_phi[np.arange(n)[None, :], c].sum(axis=1)
        values[done:done + S] = log_prior + log_lik - log_q_mu - log_q_c
        done += S
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(mc_samples))


def initial_state(data: Dataset, sigma2: float, policy: str, rng: RngStream,
                  spec: GmmSpec | None = None, K: int = 2) -> VariationalState:
    """Starting point for CAVI.

    ``"data"``: K distinct observations drawn without replacement, prior
    variances, uniform φ. ``"truth"``: true means plus N(0, 0.01 I) noise.
    """
    n, p = data.n, data.p
    if policy == DATA_INIT:
        if n < K:
            raise UsageError("data initialization needs at least K observations")
        idx = rng.gen.choice(n, size=K, replace=False)
        m = data.observations[idx].copy()
    elif policy == TRUTH_INIT:
        spec = spec or data.spec
        if spec is None:
            raise UsageError("truth-perturbed initialization needs the generating spec")
        m = spec.true_means + 0.1 * rng.gen.standard_normal((K, p))
    else:
        raise UsageError(f"unknown init policy {policy!r}; expected one of {INIT_POLICIES}")
    return VariationalState(m, np.full((K, p), float(sigma2)), np.full((n, K), 1.0 / K))


def cavi_fit(
    data: Dataset,
    sigma2: float,
    init: str | VariationalState = DATA_INIT,
    tol: float = 1e-10,
    max_iter: int = 500,
    rng: RngStream | None = None,
    restarts: int = 1,
    spec: GmmSpec | None = None,
) -> FitResult:
    """Run CAVI to convergence; with ``restarts > 1`` keep the best final ELBO."""
    if max_iter < 1:
        raise UsageError("max_iter must be >= 1")
    if restarts < 1:
        raise UsageError("restarts must be >= 1")
    best = None
    for r in range(restarts):
        if isinstance(init, VariationalState):
            state = init.copy()
        else:
            if rng is None:
                raise UsageError("an RngStream is required for randomized initialization")
            state = initial_state(data, sigma2, init, rng.derive(r) if restarts > 1 else rng, spec)
        fit = _fit_once(data, sigma2, state, tol, max_iter)
        fit.seed = None if rng is None else (rng.master_seed, rng.stream_index, *rng.path)
        if best is None or fit.final_elbo > best.final_elbo:
            best = fit
    return best


def _fit_once(data, sigma2, state, tol, max_iter) -> FitResult:
    _check_two_components(state, data)
    prev = elbo_closed_form(state, data, sigma2)
    trace = []
    converged = False
    for t in range(1, max_iter + 1):
        state = cavi_update(state, data, sigma2)
        value = elbo_closed_form(state, data, sigma2)
        if not math.isfinite(value):
            raise NumericalError("non-finite ELBO", iteration=t)
        trace.append(value)
        if abs(value - prev) <= tol * (1.0 + abs(value)):
            converged = True
            break
        prev = value
    return FitResult(state, trace, len(trace), converged)


def mse(fit_means, spec: GmmSpec) -> float:
    """Permutation-aligned Σ_k ||m_k - μ⁰_k||² / p."""
    fit_means = np.asarray(fit_means, dtype=float)
    if fit_means.shape != spec.true_means.shape:
        raise UsageError("fitted means do not match the spec's (K, p)")
    _, err = best_permutation_alignment(fit_means, spec.true_means)
    return err / spec.p
