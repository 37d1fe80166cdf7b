"""The VB ideal posterior, its mean-field KL minimizer, and the profiled-ELBO gap.

Only meant for desk-scale problems: evidence integrals use tensor
Gauss-Hermite grids, so the parameter dimension K*p must stay tiny.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .cavi import VariationalState, cavi_fit, elbo_closed_form, phi_update
from .diagnostics import DiagGaussian
from .errors import NumericalError, UsageError
from .kernels import loglik_grad_sum_batch, loglik_sum_batch
from .model import LOG_2PI, Dataset
from .numerics import RngStream


MAX_BRIDGE_DIM = 20


def _observations(data: Dataset | None, p: int):
    if data is None:
        return np.zeros((0, p))
    return data.observations


def log_prior(theta, sigma2: float):
    theta = np.atleast_2d(theta)
    d = theta.shape[1]
    return -0.5 * (theta**2).sum(axis=1) / sigma2 - 0.5 * d * (LOG_2PI + math.log(sigma2))


def log_vb_ideal_unnorm_batch(thetas, data: Dataset | None, sigma2: float, p: int | None = None):
    """log p(θ) + Σ_i m(θ; x_i) for each row of ``thetas`` (S, K*p)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    p = data.p if data is not None else p
    x = _observations(data, p)
    lp = log_prior(thetas, sigma2)
    if x.shape[0] == 0:
        return lp
    return lp + loglik_sum_batch(thetas.reshape(len(thetas), -1, p), x)


def log_vb_ideal_unnorm(theta, data: Dataset, sigma2: float) -> float:
    return float(log_vb_ideal_unnorm_batch(theta, data, sigma2)[0])


def _value_and_grad(thetas, data, sigma2, p):
    x = _observations(data, p)
    lp = log_prior(thetas, sigma2)
    g = -thetas / sigma2
    if x.shape[0]:
        ll, gl = loglik_grad_sum_batch(thetas.reshape(len(thetas), -1, p), x)
        lp = lp + ll
        g = g + gl.reshape(len(thetas), -1)
    return lp, g


# --------------------------------------------------------------------------
# stochastic-gradient bridge fit
# --------------------------------------------------------------------------


@dataclass
class BridgeFit:
    q: DiagGaussian
    kl_trace: list = field(default_factory=list)
    steps: int = 0
    mc_per_step: int = 0

    def export(self, directory, stem: str = "bridge"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / f"{stem}_trace.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "objective"])
            for t, v in enumerate(self.kl_trace, start=1):
                writer.writerow([t, f"{v:.17g}"])
        summary = {
            "steps": self.steps,
            "mc_per_step": self.mc_per_step,
            "final_objective": self.kl_trace[-1],
            "m": self.q.m.tolist(),
            "v": self.q.v.tolist(),
            "n_scale": self.q.n_scale,
        }
        (directory / f"{stem}_summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def bridge_fit(
    data: Dataset | None,
    sigma2: float,
    init: DiagGaussian,
    steps: int = 2000,
    mc_per_step: int = 32,
    step_size: float = 0.05,
    rng: RngStream | None = None,
    p: int | None = None,
) -> BridgeFit:
    """Minimize KL(q || π*) over N(m, diag(v)/n) by reparameterized SGD.

    Iterates on (√n·m, log v) with step ``step_size / √t``. In those
    coordinates the curvature is O(1) regardless of n. ``data=None`` targets
    the prior alone (pass ``p`` then).
    """
    if steps < 1 or mc_per_step < 8:
        raise UsageError("need steps >= 1 and mc_per_step >= 8")
    if rng is None:
        raise UsageError("bridge_fit needs an RngStream")
    p = data.p if data is not None else p
    if p is None or init.dim % p:
        raise UsageError("cannot infer the component dimension p")
    if init.dim > MAX_BRIDGE_DIM:
        raise UsageError(f"bridge_fit is limited to K*p <= {MAX_BRIDGE_DIM}")
    n = init.n_scale
    m = init.m.copy()
    log_v = np.log(init.v)
    trace = []
    for t in range(1, steps + 1):
        sd = np.sqrt(np.exp(log_v) / n)
        eps = rng.gen.standard_normal((mc_per_step, init.dim))
        theta = m + sd * eps
        val, grad = _value_and_grad(theta, data, sigma2, p)
        entropy = 0.5 * float(np.log(sd**2).sum()) + 0.5 * init.dim * (1.0 + LOG_2PI)
        objective = -entropy - float(val.mean())
        if not math.isfinite(objective):
            raise NumericalError("non-finite bridge objective", iteration=t)
        trace.append(objective)
        g_m = -grad.mean(axis=0)
        g_logv = -0.5 - 0.5 * (grad * eps).mean(axis=0) * sd
        lr = step_size / math.sqrt(t)
        m = m - lr * g_m / n          # a step of lr on √n·m
        log_v = log_v - lr * g_logv
    return BridgeFit(DiagGaussian(m, np.exp(log_v), n), trace, steps, mc_per_step)


# --------------------------------------------------------------------------
# evidence by Gauss-Hermite quadrature
# --------------------------------------------------------------------------


class QuadratureResult(NamedTuple):
    log_evidence: float
    piece_log_mass: np.ndarray     # per label-permuted piece
    piece_means: np.ndarray        # posterior mean restricted to each piece
    centers: np.ndarray
    nodes_per_axis: int


# bump sd relative to a piece's own sd; wider than 1 keeps f / g bounded in the tails
_BUMP_WIDTH = 1.5
QUAD_LEVELS = (8, 12, 16, 24, 32, 48, 64)


def _gh_rule(k):
    x, w = np.polynomial.hermite_e.hermegauss(k)
    with np.errstate(divide="ignore"):
        return x, np.log(w) - 0.5 * LOG_2PI


def _gaussian_logpdf(theta, mean, sd):
    z = (theta - mean) / sd
    return -0.5 * (z**2).sum(axis=1) - np.log(sd).sum() - 0.5 * theta.shape[1] * LOG_2PI


def _integrate_level(data, sigma2, centers, scales, k, chunk=1 << 16):
    """One tensor-grid pass; returns (log total, per-piece log mass, means, variances)."""
    xi, logw = _gh_rule(k)
    J, d = centers.shape
    # f / Σg is bounded, so nodes whose product weight is below e^-45 of the peak cannot matter
    grid = np.indices((k,) * d).reshape(d, -1).T
    keep = logw[grid].sum(axis=1) >= d * logw.max() - 45.0
    nodes = grid[keep]
    total_nodes = len(nodes)
    piece_lse = np.full(J, -np.inf)
    piece_mean = np.zeros((J, d))
    piece_var = np.zeros((J, d))
    for j in range(J):
        lse_parts, m1_parts, m2_parts = [], [], []
        for lo in range(0, total_nodes, chunk):
            idx = nodes[lo:lo + chunk]
            theta = centers[j] + scales[j] * xi[idx]
            log_weight = logw[idx].sum(axis=1)
            log_f = log_vb_ideal_unnorm_batch(theta, data, sigma2)
            log_g = np.stack([_gaussian_logpdf(theta, centers[l], scales[l]) for l in range(J)])
            top = log_g.max(axis=0)
            log_sum_g = top + np.log(np.exp(log_g - top).sum(axis=0))
            # normalized GH weights integrate against g_j, so the summand is f / Σ_l g_l
            term = log_weight + log_f - log_sum_g
            finite = np.isfinite(term)
            if not finite.any():
                continue
            t = term[finite]
            c = t.max()
            wts = np.exp(t - c)
            s = wts.sum()
            th = theta[finite]
            lse_parts.append(c + math.log(s))
            m1_parts.append(wts @ th / s)
            m2_parts.append(wts @ th**2 / s)
        if lse_parts:
            parts = np.array(lse_parts)
            piece_lse[j] = parts.max() + math.log(np.exp(parts - parts.max()).sum())
            share = np.exp(parts - piece_lse[j])[:, None]
            piece_mean[j] = (share * np.array(m1_parts)).sum(axis=0)
            piece_var[j] = (share * np.array(m2_parts)).sum(axis=0) - piece_mean[j] ** 2
    top = piece_lse.max()
    return top + math.log(np.exp(piece_lse - top).sum()), piece_lse, piece_mean, piece_var


def log_evidence_quadrature(
    data: Dataset,
    sigma2: float,
    center_means,
    center_sd,
    levels=QUAD_LEVELS,
    rtol: float = 1e-6,
    adapt_rounds: int = 3,
    adapt_nodes: int = 12,
) -> QuadratureResult:
    """c(x) = log ∫ p(θ) exp{M_n(θ; x)} dθ.

    The integrand is split by a partition of unity over the K! label
    permutations of a Gaussian bump N(center, center_sd²); each piece is
    integrated on its own Gauss-Hermite grid. The bumps are first moved to
    each piece's own mean and standard deviation (``adapt_rounds`` coarse
    passes), then node counts climb through ``levels`` until two consecutive
    estimates of c(x) agree within ``rtol``. When K*p <= 2 and the ladder
    stalls (heavily overlapping label modes), a dense trapezoid grid over
    the union of the bumps takes over.
    """
    center_means = np.asarray(center_means, dtype=float)
    center_sd = np.asarray(center_sd, dtype=float)
    K, p = center_means.shape
    if K * p > 4:
        raise UsageError("quadrature is limited to K*p <= 4")
    perms = list(itertools.permutations(range(K)))
    centers = np.stack([center_means[list(pi)].reshape(-1) for pi in perms])
    scales = np.stack([center_sd[list(pi)].reshape(-1) for pi in perms])
    for _ in range(adapt_rounds):
        value, _, means, var = _integrate_level(data, sigma2, centers, scales, adapt_nodes)
        if not (math.isfinite(value) and np.all(var > 0)):
            break
        centers, scales = means, _BUMP_WIDTH * np.sqrt(var)
    prev = None
    for k in levels:
        value, lse, means, _ = _integrate_level(data, sigma2, centers, scales, k)
        if not math.isfinite(value):
            raise NumericalError(f"quadrature produced a non-finite value at {k} nodes per axis")
        if prev is not None and abs(value - prev) <= rtol:
            return QuadratureResult(value, lse, means, centers, k)
        prev = value
    if K * p <= 2:
        # overlapping label modes defeat the partition; a dense grid does not care
        return _trapezoid_evidence(data, sigma2, centers, scales, rtol)
    raise NumericalError(f"quadrature did not converge within {levels[-1]} nodes per axis")


def _trapezoid_evidence(data, sigma2, centers, scales, rtol, sizes=(128, 256, 512, 1024), reach=12.0):
    lo = (centers - reach * scales).min(axis=0)
    hi = (centers + reach * scales).max(axis=0)
    d = centers.shape[1]
    prev = None
    for k in sizes:
        axes = [np.linspace(a, b, k) for a, b in zip(lo, hi)]
        theta = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        log_cell = float(np.log((hi - lo) / (k - 1)).sum())
        log_f = log_vb_ideal_unnorm_batch(theta, data, sigma2) + log_cell
        top = log_f.max()
        value = top + math.log(np.exp(log_f - top).sum())
        if prev is not None and abs(value - prev) <= rtol:
            owner = np.stack([_gaussian_logpdf(theta, c, s) for c, s in zip(centers, scales)]).argmax(axis=0)
            wts = np.exp(log_f - top)
            J = len(centers)
            mass = np.array([wts[owner == j].sum() for j in range(J)])
            with np.errstate(divide="ignore"):
                lse = top + np.log(mass)
            means = np.stack([wts[owner == j] @ theta[owner == j] / max(mass[j], 1e-300) for j in range(J)])
            return QuadratureResult(value, lse, means, centers, k)
        prev = value
    raise NumericalError(f"quadrature did not converge on a {sizes[-1]}-point grid")


# --------------------------------------------------------------------------
# profiled ELBO and the functional gap
# --------------------------------------------------------------------------


def _state_from_q(q: DiagGaussian, p: int, data: Dataset) -> VariationalState:
    m = q.m.reshape(-1, p)
    d = q.cov_diag.reshape(-1, p)
    state = VariationalState(m, d, np.full((data.n, m.shape[0]), 1.0 / m.shape[0]))
    state.phi = phi_update(state, data)
    return state


def elbo_profiled(q: DiagGaussian, data: Dataset, sigma2: float) -> float:
    """ELBO with q(z) maximized out for a fixed Gaussian q(θ)."""
    return elbo_closed_form(_state_from_q(q, data.p, data), data, sigma2)


class GapResult(NamedTuple):
    gap: float
    std_error: float
    c_x: float
    kl_term: float
    elbo_p: float


def quadrature_center(q: DiagGaussian, data: Dataset, sigma2: float):
    """Bump centers and widths for the evidence quadrature.

    CAVI is run from q's means and from a symmetry-broken start around the
    sample mean; the higher-ELBO optimum wins. A collapsed optimum (equal
    means) would stack every piece on one bump and hide the label modes.
    Bump sd is twice the CAVI sd.
    """
    p = data.p
    m0 = q.m.reshape(-1, p)
    K = m0.shape[0]
    # one-sided offsets so even a single observation breaks the tie
    spread = -0.5 * math.sqrt(sigma2) * np.arange(K)[:, None] * np.ones(p)
    starts = [m0, data.observations.mean(axis=0) + spread]
    best = None
    for m_start in starts:
        start = VariationalState(m_start.copy(), np.full(m0.shape, float(sigma2)), np.full((data.n, K), 1.0 / K))
        fit = cavi_fit(data, sigma2, init=start, tol=1e-12, max_iter=2000)
        if best is None or fit.final_elbo > best.final_elbo:
            best = fit
    return best.state.m, 2.0 * np.sqrt(best.state.d)


def functional_gap(q: DiagGaussian, data: Dataset, sigma2: float, mc_samples: int, rng: RngStream,
                   levels=None) -> GapResult:
    """c(x) - KL(q || π*) - ELBO_p(q), which is nonnegative."""
    if q.dim > 4:
        raise UsageError("functional_gap needs K*p <= 4")
    if q.n_scale != data.n:
        raise UsageError("q.n_scale must equal the sample size")
    center, sd = quadrature_center(q, data, sigma2)
    c_x = log_evidence_quadrature(data, sigma2, center, sd, levels=levels or QUAD_LEVELS).log_evidence
    theta = q.sample(mc_samples, rng)
    diff = q.logpdf(theta) - log_vb_ideal_unnorm_batch(theta, data, sigma2)
    kl_term = float(diff.mean()) + c_x
    se = float(diff.std(ddof=1) / math.sqrt(mc_samples))
    elbo_p = elbo_profiled(q, data, sigma2)
    return GapResult(c_x - kl_term - elbo_p, se, c_x, kl_term, elbo_p)
