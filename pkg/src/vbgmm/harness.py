"""Replicated simulation studies: Table-1 MSE grid, rates, normality, BvM contraction.

Every replication owns ``RngStream(master_seed, stable_index(study, cell, rep))``
and is a pure function of its arguments, so results do not depend on how
many worker processes run them.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .bridge import _state_from_q, elbo_profiled, functional_gap
from .cavi import DATA_INIT, INIT_POLICIES, TRUTH_INIT, VariationalState, cavi_fit, elbo_closed_form, mse
from .diagnostics import (
    DiagGaussian,
    DiagnosticsReport,
    delta_n,
    kl_diag_gaussians,
    reference_gaussian,
    tail_mass_outside_ball,
    tv_monte_carlo,
    underdispersion_check,
)
from .errors import NumericalError, UsageError
from .model import GmmSpec, information_matrix_mc, sample_dataset
from .numerics import (
    RngStream,
    SummaryStat,
    align_to_reference,
    ks_statistic_vs_std_normal,
    stable_index,
)
from .tail import TailQuery, fixed_alpha_grid, lemma3_ratio_scan, tail_moment_exact, tail_moment_mc, write_scan_csv

log = logging.getLogger(__name__)

# (n, p, sigma2, w) -> (mean MSE, sd) over 100 runs, as published
REFERENCE_TABLE1 = {
    (50, 2, 1, 10): (0.4115, 0.1545), (50, 2, 1, 50): (7.8830, 1.0260),
    (50, 2, 25, 10): (0.0905, 0.0620), (50, 2, 25, 50): (0.0960, 0.0740),
    (50, 5, 1, 10): (0.3894, 0.1106), (50, 5, 1, 50): (7.8304, 0.6798),
    (50, 5, 25, 10): (0.0824, 0.0372), (50, 5, 25, 50): (0.0990, 0.0396),
    (50, 10, 1, 10): (0.3960, 0.0726), (50, 10, 1, 50): (7.9920, 0.7303),
    (50, 10, 25, 10): (0.0863, 0.0323), (50, 10, 25, 50): (0.0991, 0.0328),
    (50, 50, 1, 10): (0.3922, 0.0513), (50, 50, 1, 50): (7.9346, 0.5741),
    (50, 50, 25, 10): (0.0834, 0.0134), (50, 50, 25, 50): (0.0938, 0.0138),
    (200, 2, 1, 10): (0.0383, 0.0213), (200, 2, 1, 50): (0.5230, 0.1145),
    (200, 2, 25, 10): (0.0211, 0.0146), (200, 2, 25, 50): (0.0208, 0.0128),
    (200, 5, 1, 10): (0.0408, 0.0154), (200, 5, 1, 50): (0.5104, 0.0580),
    (200, 5, 25, 10): (0.0198, 0.0094), (200, 5, 25, 50): (0.0202, 0.0090),
    (200, 10, 1, 10): (0.0380, 0.0099), (200, 10, 1, 50): (0.5109, 0.0441),
    (200, 10, 25, 10): (0.0190, 0.0060), (200, 10, 25, 50): (0.0217, 0.0068),
    (200, 50, 1, 10): (0.0392, 0.0052), (200, 50, 1, 50): (0.5138, 0.0235),
    (200, 50, 25, 10): (0.0199, 0.0029), (200, 50, 25, 50): (0.0206, 0.0026),
    (1000, 2, 1, 10): (0.0051, 0.0035), (1000, 2, 1, 50): (0.0226, 0.0084),
    (1000, 2, 25, 10): (0.0037, 0.0027), (1000, 2, 25, 50): (0.0042, 0.0030),
    (1000, 5, 1, 10): (0.0046, 0.0019), (1000, 5, 1, 50): (0.0250, 0.0059),
    (1000, 5, 25, 10): (0.0041, 0.0019), (1000, 5, 25, 50): (0.0043, 0.0173),
    (1000, 10, 1, 10): (0.0048, 0.0017), (1000, 10, 1, 50): (0.0240, 0.0043),
    (1000, 10, 25, 10): (0.0042, 0.0014), (1000, 10, 25, 50): (0.0040, 0.0013),
    (1000, 50, 1, 10): (0.0047, 0.0007), (1000, 50, 1, 50): (0.0239, 0.0019),
    (1000, 50, 25, 10): (0.0041, 0.0006), (1000, 50, 25, 50): (0.0040, 0.0005),
    (5000, 2, 1, 10): (0.0009, 0.0007), (5000, 2, 1, 50): (0.0016, 0.0009),
    (5000, 2, 25, 10): (0.0007, 0.0006), (5000, 2, 25, 50): (0.0009, 0.0006),
    (5000, 5, 1, 10): (0.0008, 0.0003), (5000, 5, 1, 50): (0.0016, 0.0006),
    (5000, 5, 25, 10): (0.0008, 0.0003), (5000, 5, 25, 50): (0.0008, 0.0004),
    (5000, 10, 1, 10): (0.0008, 0.0003), (5000, 10, 1, 50): (0.0016, 0.0004),
    (5000, 10, 25, 10): (0.0008, 0.0002), (5000, 10, 25, 50): (0.0008, 0.0003),
    (5000, 50, 1, 10): (0.0008, 0.0001), (5000, 50, 1, 50): (0.0016, 0.0002),
    (5000, 50, 25, 10): (0.0008, 0.0001), (5000, 50, 25, 50): (0.0008, 0.0001),
}

DEFAULT_MC = {"info_samples": 200_000, "tv_samples": 100_000, "tail_samples": 100_000}
MAX_FAILURE_FRACTION = 0.05


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    grid: dict = field(default_factory=lambda: {
        "n": [50, 200, 1000, 5000],
        "p": [2, 5, 10, 50],
        "sigma2_w": [[1, 10], [1, 50], [25, 10], [25, 50]],
    })
    replications: int = 100
    master_seed: int = 20240917
    init_policy: str = DATA_INIT
    tol: float = 1e-10
    max_iter: int = 500
    restarts: int = 1
    mc: dict = field(default_factory=lambda: dict(DEFAULT_MC))
    output_dir: str = "results"
    eta: float = 0.5
    direction: list | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise UsageError("replications must be >= 1")
        for key in ("n", "p", "sigma2_w"):
            if key not in self.grid or not self.grid[key]:
                raise UsageError(f"grid.{key} must be a non-empty list")
        values = list(self.grid["n"]) + list(self.grid["p"])
        values += [v for pair in self.grid["sigma2_w"] for v in pair]
        if any(not (v > 0) for v in values):
            raise UsageError("every grid value must be positive")
        if any(len(pair) != 2 for pair in self.grid["sigma2_w"]):
            raise UsageError("grid.sigma2_w entries must be [sigma2, w] pairs")
        if self.init_policy not in INIT_POLICIES:
            raise UsageError(f"init_policy must be one of {INIT_POLICIES}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise UsageError("master_seed must be a 64-bit unsigned integer")
        self.mc = {**DEFAULT_MC, **(self.mc or {})}

    def cells(self):
        for n in self.grid["n"]:
            for p in self.grid["p"]:
                for sigma2, w in self.grid["sigma2_w"]:
                    yield (int(n), int(p), _num(sigma2), _num(w))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = asdict(self)
        data.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig(**data)

    @classmethod
    def from_dict(cls, data: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged = asdict(base) if base is not None else {}
        merged.update(data)
        return cls(**merged)

    @classmethod
    def from_json(cls, path, base=None) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base)

    def prepare_output(self) -> Path:
        out = Path(self.output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output_dir {out}: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise UsageError(f"output_dir {out} is not writable")
        return out


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


def table1_config(**kw) -> ExperimentConfig:
    return ExperimentConfig().with_overrides(**kw)


def rates_config(**kw) -> ExperimentConfig:
    base = ExperimentConfig(grid={"n": [500, 1000, 2000, 4000], "p": [2, 4, 8], "sigma2_w": [[25, 10]]},
                            replications=50, init_policy=TRUTH_INIT)
    return base.with_overrides(**kw)


def normality_config(**kw) -> ExperimentConfig:
    base = ExperimentConfig(grid={"n": [2000], "p": [3], "sigma2_w": [[25, 10]]}, replications=200)
    return base.with_overrides(**kw)


def bvm_config(**kw) -> ExperimentConfig:
    base = ExperimentConfig(grid={"n": [500, 2000, 8000], "p": [2], "sigma2_w": [[25, 10]]},
                            replications=20)
    return base.with_overrides(**kw)


STUDY_DEFAULTS = {
    "table1": table1_config,
    "rates": rates_config,
    "normality": normality_config,
    "bvm": bvm_config,
}


# --------------------------------------------------------------------------
# plumbing
# --------------------------------------------------------------------------


@dataclass
class ReplicationResult:
    n: int
    p: int
    sigma2: float
    w: float
    replication: int
    mse: float
    iterations: int
    converged: bool
    elapsed_ms: float
    seed: int
    extra: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class Table1Cell:
    n: int
    p: int
    sigma2: float
    w: float
    mse_stat: SummaryStat
    failures: int = 0


def _pmap(fn, tasks, jobs):
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (8 * jobs))))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, np.integer):
        return int(v)
    return v


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fit_replication(study, cell, rep, cfg_items, extra_fn=None, extra_args=None):
    n, p, sigma2, w = cell
    master_seed, init_policy, tol, max_iter, restarts = cfg_items
    index = stable_index(study, n, p, sigma2, w, rep)
    stream = RngStream(int(master_seed), index)
    start = time.perf_counter()
    spec = GmmSpec.symmetric(p, w, sigma2)
    try:
        data = sample_dataset(spec, n, stream.derive(0))
        fit = cavi_fit(data, sigma2, init=init_policy, tol=tol, max_iter=max_iter,
                       rng=stream.derive(1), restarts=restarts, spec=spec)
        extra = extra_fn(spec, data, fit, stream, extra_args) if extra_fn else {}
        result = ReplicationResult(n, p, sigma2, w, rep, mse(fit.state.m, spec), fit.iterations,
                                   fit.converged, 0.0, index, extra)
    except NumericalError as exc:
        result = ReplicationResult(n, p, sigma2, w, rep, math.nan, 0, False, 0.0, index, {}, str(exc))
    result.elapsed_ms = 1000.0 * (time.perf_counter() - start)
    return result


def _cfg_items(cfg):
    return (cfg.master_seed, cfg.init_policy, cfg.tol, cfg.max_iter, cfg.restarts)


def _check_failures(results, cell):
    bad = sum(r.error is not None for r in results)
    if bad:
        log.warning("cell %s: %d of %d replications failed numerically", cell, bad, len(results))
    if bad > MAX_FAILURE_FRACTION * len(results):
        raise NumericalError(f"cell {cell}: {bad} of {len(results)} replications failed")
    return bad


def _group(results, cells, reps):
    by_cell = {c: [] for c in cells}
    for r in results:
        by_cell[(r.n, r.p, r.sigma2, r.w)].append(r)
    for c in by_cell:
        by_cell[c].sort(key=lambda r: r.replication)
        assert len(by_cell[c]) == reps
    return by_cell


def _write_failures(out, name, results):
    failed = [r for r in results if r.error is not None]
    _write_csv(out / name, ["n", "p", "sigma2", "w", "rep", "seed", "error"],
               [(r.n, r.p, r.sigma2, r.w, r.replication, r.seed, r.error) for r in failed])


# --------------------------------------------------------------------------
# Table 1
# --------------------------------------------------------------------------


def _table1_task(args):
    cell, rep, items = args
    return _fit_replication("table1", cell, rep, items)


def table1_tolerance(reference_mean, reference_sd, reps=100):
    return max(3.0 * reference_sd / math.sqrt(reps), 0.15 * reference_mean)


@dataclass
class Table1Report:
    cells: list
    replications: list
    gate: list          # (cell, reproduced, reference_mean, tolerance, ok)
    elapsed_s: float

    @property
    def ok(self):
        return all(g[-1] for g in self.gate)


def run_table1(config: ExperimentConfig, jobs: int = 1, write: bool = True) -> Table1Report:
    t0 = time.perf_counter()
    out = config.prepare_output() if write else None
    cells = list(config.cells())
    items = _cfg_items(config)
    tasks = [(c, r, items) for c in cells for r in range(config.replications)]
    results = _pmap(_table1_task, tasks, jobs)
    grouped = _group(results, cells, config.replications)
    table, gate = [], []
    for c in cells:
        rs = grouped[c]
        bad = _check_failures(rs, c)
        ok_vals = [r.mse for r in rs if r.error is None]
        cell = Table1Cell(*c, SummaryStat.of(ok_vals), bad)
        table.append(cell)
        if c in REFERENCE_TABLE1:
            pm, psd = REFERENCE_TABLE1[c]
            tol = table1_tolerance(pm, psd)
            gate.append((c, cell.mse_stat.mean, pm, tol, abs(cell.mse_stat.mean - pm) <= tol))
    if write:
        _write_csv(out / "table1.csv", ["n", "p", "sigma2", "w", "mse_mean", "mse_sd", "reps_ok"],
                   [(c.n, c.p, c.sigma2, c.w, c.mse_stat.mean, c.mse_stat.sd, c.mse_stat.count)
                    for c in table])
        _write_csv(out / "table1_replications.csv",
                   ["n", "p", "sigma2", "w", "rep", "seed", "mse", "iterations", "converged"],
                   [(r.n, r.p, r.sigma2, r.w, r.replication, r.seed, r.mse, r.iterations, r.converged)
                    for r in results if r.error is None])
        _write_failures(out, "table1_failures.csv", results)
        _write_csv(out / "table1_gate.csv",
                   ["n", "p", "sigma2", "w", "mse_mean", "reference_mean", "tolerance", "ok"],
                   [(*g[0], g[1], g[2], g[3], g[4]) for g in gate])
    return Table1Report(table, results, gate, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# rates
# --------------------------------------------------------------------------


def _sq_error_extra(spec, data, fit, stream, _):
    aligned, _ = align_to_reference(fit.state.m, spec.true_means)
    return {"sq_error": float(((aligned - spec.true_means) ** 2).sum())}


def _rates_task(args):
    cell, rep, items = args
    return _fit_replication("rates", cell, rep, items, _sq_error_extra)


def fit_loglog_slope(x, y):
    """Least-squares line through (x, y); returns (slope, intercept)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        raise UsageError("regression needs at least two distinct x values")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(slope), float(intercept)


@dataclass
class RateReport:
    slope: float
    intercept: float
    points: list          # (n, p, sigma2, w, mean_sq_error, sd, reps_ok)
    halving_ratios: list  # (p, n, 2n, err(2n)/err(n))


RATE_STATISTIC_NOTE = (
    "statistic = sum_k ||m_k - mu0_k||^2 after permutation alignment (the squared vector norm "
    "||theta_hat - theta*||^2 = O_p(p/n)); table MSE is this divided by p. "
    "Regression: log(mean statistic) on log(p/n); slope 1 is the predicted rate."
)


def run_rate_experiment(config: ExperimentConfig, jobs: int = 1, write: bool = True) -> RateReport:
    cells = list(config.cells())
    if len(cells) < 2:
        raise UsageError("rate experiment needs at least two grid points")
    out = config.prepare_output() if write else None
    items = _cfg_items(config)
    results = _pmap(_rates_task, [(c, r, items) for c in cells for r in range(config.replications)], jobs)
    grouped = _group(results, cells, config.replications)
    points = []
    for c in cells:
        rs = grouped[c]
        _check_failures(rs, c)
        stat = SummaryStat.of([r.extra["sq_error"] for r in rs if r.error is None])
        points.append((*c, stat.mean, stat.sd, stat.count))
    xs = [math.log(pt[1] / pt[0]) for pt in points]
    ys = [math.log(pt[4]) for pt in points]
    slope, intercept = fit_loglog_slope(xs, ys)
    lookup = {(pt[0], pt[1], pt[2], pt[3]): pt[4] for pt in points}
    halving = []
    for (n, p, s2, w), err in lookup.items():
        if (2 * n, p, s2, w) in lookup:
            halving.append((p, n, 2 * n, lookup[(2 * n, p, s2, w)] / err))
    if write:
        _write_csv(out / "rates.csv",
                   ["n", "p", "sigma2", "w", "mean_sq_error", "sd_sq_error", "reps_ok",
                    "log_p_over_n", "log_mean_sq_error"],
                   [(*pt, x, y) for pt, x, y in zip(points, xs, ys)])
        _write_csv(out / "rates_replications.csv",
                   ["n", "p", "sigma2", "w", "rep", "seed", "sq_error", "mse", "iterations"],
                   [(r.n, r.p, r.sigma2, r.w, r.replication, r.seed, r.extra["sq_error"], r.mse,
                     r.iterations) for r in results if r.error is None])
        _write_failures(out, "rates_failures.csv", results)
        (out / "rates_summary.json").write_text(json.dumps(
            {"note": RATE_STATISTIC_NOTE, "slope": slope, "intercept": intercept,
             "halving_ratios": halving}, indent=2) + "\n")
    return RateReport(slope, intercept, points, halving)


# --------------------------------------------------------------------------
# asymptotic normality
# --------------------------------------------------------------------------


def _information(study, p, w, sigma2, config):
    spec = GmmSpec.symmetric(p, w, sigma2)
    stream = RngStream(int(config.master_seed), stable_index(study, "V", p, w))
    try:
        return information_matrix_mc(spec, int(config.mc["info_samples"]), stream)
    except NumericalError as exc:
        raise NumericalError(f"information matrix estimation failed for p={p}, w={w}: {exc}") from exc


def _normality_extra(spec, data, fit, stream, args):
    alpha, sigma_alpha = args
    aligned, _ = align_to_reference(fit.state.m, spec.true_means)
    dev = aligned.reshape(-1) - spec.theta_star
    return {"statistic": float(math.sqrt(data.n) * alpha @ dev / sigma_alpha)}


def _normality_task(args):
    cell, rep, items, extra_args = args
    return _fit_replication("normality", cell, rep, items, _normality_extra, extra_args)


@dataclass
class NormalityReport:
    cell: tuple
    ks_stat: float
    p_value: float
    empirical_sd: float
    sigma_alpha: float
    statistics: list


def unit_direction(direction, dim):
    if direction is None:
        alpha = np.zeros(dim)
        alpha[0] = 1.0
        return alpha
    alpha = np.asarray(direction, dtype=float)
    if alpha.shape != (dim,) or not np.linalg.norm(alpha) > 0:
        raise UsageError(f"direction must be a non-zero vector of length {dim}")
    return alpha / np.linalg.norm(alpha)


def run_normality_experiment(config: ExperimentConfig, jobs: int = 1, write: bool = True):
    out = config.prepare_output() if write else None
    items = _cfg_items(config)
    reports, all_rows = [], []
    for cell in config.cells():
        n, p, sigma2, w = cell
        info = _information("normality", p, w, sigma2, config)
        V = info.by_hessian
        try:
            np.linalg.cholesky(V)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"estimated V is not positive definite for cell {cell}") from exc
        alpha = unit_direction(config.direction, 2 * p)
        sigma_alpha = math.sqrt(float(alpha @ np.linalg.solve(V, alpha)))
        tasks = [(cell, r, items, (alpha, sigma_alpha)) for r in range(config.replications)]
        rs = sorted(_pmap(_normality_task, tasks, jobs), key=lambda r: r.replication)
        _check_failures(rs, cell)
        stats = [r.extra["statistic"] for r in rs if r.error is None]
        ks, pv = ks_statistic_vs_std_normal(stats)
        reports.append(NormalityReport(cell, ks, pv, float(np.std(stats, ddof=1)), sigma_alpha, stats))
        all_rows += [(*cell, r.replication, r.seed, r.extra["statistic"]) for r in rs if r.error is None]
    if write:
        _write_csv(out / "normality.csv", ["n", "p", "sigma2", "w", "rep", "seed", "statistic"], all_rows)
        _write_csv(out / "normality_summary.csv",
                   ["n", "p", "sigma2", "w", "ks_stat", "p_value", "empirical_sd", "sigma_alpha", "reps_ok"],
                   [(*r.cell, r.ks_stat, r.p_value, r.empirical_sd, r.sigma_alpha, len(r.statistics))
                    for r in reports])
    return reports


# --------------------------------------------------------------------------
# Bernstein-von Mises contraction
# --------------------------------------------------------------------------


def vb_posterior_gaussian(fit, spec, n) -> DiagGaussian:
    """Label-aligned CAVI posterior as N(m, diag(v)/n) over the stacked means."""
    aligned_m, perm = align_to_reference(fit.state.m, spec.true_means)
    aligned_d = np.empty_like(fit.state.d)
    for k, j in enumerate(perm):
        aligned_d[j] = fit.state.d[k]
    return DiagGaussian(aligned_m.reshape(-1), n * aligned_d.reshape(-1), n)


def diagnose_fit(spec, data, fit, V, eta, tv_samples, tail_samples, stream) -> DiagnosticsReport:
    n = data.n
    q_star = vb_posterior_gaussian(fit, spec, n)
    theta_star = spec.theta_star
    delta = delta_n(theta_star, data, V)
    q0 = reference_gaussian(theta_star, delta, V, n)
    tv, tv_se = tv_monte_carlo(q_star, q0, tv_samples, stream.derive(2))
    tail, _ = tail_mass_outside_ball(q_star, theta_star, eta, tail_samples, stream.derive(3))
    ratio, _ = underdispersion_check(V)
    return DiagnosticsReport(delta.tolist(), kl_diag_gaussians(q_star, q0), tv, tv_se, tail, eta, ratio)


def _bvm_extra(spec, data, fit, stream, args):
    V, eta, tv_samples, tail_samples = args
    rep = diagnose_fit(spec, data, fit, V, eta, tv_samples, tail_samples, stream)
    tail_se = math.sqrt(rep.tail_mass * (1 - rep.tail_mass) / tail_samples)
    return {"kl": rep.kl_to_reference, "tv": rep.tv_estimate, "tv_se": rep.tv_std_error,
            "tail_mass": rep.tail_mass, "tail_se": tail_se}


def _bvm_task(args):
    cell, rep, items, extra_args = args
    return _fit_replication("bvm", cell, rep, items, _bvm_extra, extra_args)


BVM_COLUMNS = ["n", "p", "sigma2", "w", "rep", "seed", "tv2", "kl", "tail_mass",
               "tail_scaled", "tv2_scaled", "tv_estimate", "tv_std_error", "tail_std_error", "pinsker_ok"]


def pinsker_ok(tv, tv_se, kl, k=4.0):
    return tv <= math.sqrt(kl / 2.0) + k * tv_se


@dataclass
class BvmReport:
    rows: list            # dicts keyed by BVM_COLUMNS
    eta: float

    def medians(self, key, p=None):
        by_n = {}
        for r in self.rows:
            if p is None or r["p"] == p:
                by_n.setdefault(r["n"], []).append(r[key])
        return {n: float(np.median(v)) for n, v in sorted(by_n.items())}

    def gates(self):
        tv2 = self.medians("tv2")
        tail_n = {n: m * n * self.eta**2 for n, m in self.medians("tail_mass").items()}
        tv_vals = [tv2[n] for n in sorted(tv2)]
        tail_vals = list(tail_n.values())
        return {
            "tv2_medians": tv2,
            "tv2_strictly_decreasing": all(a > b for a, b in zip(tv_vals, tv_vals[1:])),
            "tail_n_eta2_medians": tail_n,
            "tail_bounded_5x": max(tail_vals) <= 5.0 * min(tail_vals),
            "tail_all_zero": all(v == 0 for v in tail_vals),
            "pinsker_all_rows": all(r["pinsker_ok"] for r in self.rows),
        }


def run_bvm_experiment(config: ExperimentConfig, jobs: int = 1, write: bool = True) -> BvmReport:
    out = config.prepare_output() if write else None
    items = _cfg_items(config)
    cells = list(config.cells())
    infos = {}
    tasks = []
    for cell in cells:
        n, p, sigma2, w = cell
        if (p, w) not in infos:
            infos[(p, w)] = _information("bvm", p, w, sigma2, config).by_hessian
        args = (infos[(p, w)], float(config.eta), int(config.mc["tv_samples"]), int(config.mc["tail_samples"]))
        tasks += [(cell, r, items, args) for r in range(config.replications)]
    results = _pmap(_bvm_task, tasks, jobs)
    grouped = _group(results, cells, config.replications)
    rows = []
    eta = float(config.eta)
    for cell in cells:
        _check_failures(grouped[cell], cell)
        for r in grouped[cell]:
            if r.error is not None:
                continue
            e = r.extra
            rows.append({
                "n": r.n, "p": r.p, "sigma2": r.sigma2, "w": r.w, "rep": r.replication, "seed": r.seed,
                "tv2": e["tv"] ** 2, "kl": e["kl"], "tail_mass": e["tail_mass"],
                "tail_scaled": e["tail_mass"] * r.n * eta**2 / r.p,
                "tv2_scaled": e["tv"] ** 2 * math.sqrt(r.n / r.p**3),
                "tv_estimate": e["tv"], "tv_std_error": e["tv_se"], "tail_std_error": e["tail_se"],
                "pinsker_ok": pinsker_ok(e["tv"], e["tv_se"], e["kl"]),
            })
    if write:
        _write_csv(out / "bvm.csv", BVM_COLUMNS, [[row[c] for c in BVM_COLUMNS] for row in rows])
        _write_failures(out, "bvm_failures.csv", results)
    return BvmReport(rows, eta)


# --------------------------------------------------------------------------
# tail moments and the functional gap
# --------------------------------------------------------------------------


# 20 (p, K, B) points where the tail moment is large enough for MC to resolve
TAIL_MC_GRID = [TailQuery(p, K, B) for p, B in [(1, 1.5), (2, 2.0), (3, 2.5), (5, 3.0), (10, 4.0)]
                for K in (0, 1, 2, 3)]


def run_tailscan(cfg, alpha=0.5):
    out = cfg.prepare_output()
    rows, envelope = lemma3_ratio_scan(fixed_alpha_grid(alpha), alpha_cap=alpha)
    write_scan_csv(rows, out / "tailscan.csv")
    mc_rows = []
    for i, q in enumerate(TAIL_MC_GRID):
        stream = RngStream(int(cfg.master_seed), stable_index("tailscan", q.p, q.K, q.B, i))
        est, se, informative = tail_moment_mc(q, int(cfg.mc["tail_samples"]), stream)
        exact = tail_moment_exact(q)
        z = (est - exact) / se if se > 0 else (0.0 if est == exact else math.inf)
        mc_rows.append((q.p, q.K, q.B, exact, est, se, z, informative))
    _write_csv(out / "tail_mc.csv", ["p", "K", "B", "exact", "mc", "std_error", "z", "informative"], mc_rows)
    ratios = [r.ratio for r in rows]
    gates = {
        "mc_within_4se": all(abs(r[6]) <= 4.0 for r in mc_rows),
        "ratios_finite_positive": all(math.isfinite(x) and x > 0 for x in ratios),
        "envelope": envelope,
        "envelope_ratio": envelope[1] / envelope[0] if envelope else None,
    }
    gates["envelope_ok"] = envelope is not None and gates["envelope_ratio"] <= 100.0
    return rows, mc_rows, gates


# (label, n, p, w, sigma2): every case has K*p <= 4
GAP_CASES = [("n50_p1_w2", 50, 1, 2.0, 25.0), ("n1_p1_w0", 1, 1, 0.0, 25.0), ("n30_p2_w1.5", 30, 2, 1.5, 25.0)]
GAP_VARIANCE_SCALES = (1.0, 0.1, 0.01)


def run_bridge_gap(cfg, cases=GAP_CASES, scales=GAP_VARIANCE_SCALES, mc_samples=None, perturbations=10):
    out = cfg.prepare_output()
    mc_samples = int(mc_samples or cfg.mc.get("gap_samples", 20_000))
    gap_rows, dom_rows = [], []
    for label, n, p, w, sigma2 in cases:
        spec = GmmSpec.symmetric(p, w, sigma2)
        stream = RngStream(int(cfg.master_seed), stable_index("bridge-gap", label))
        data = sample_dataset(spec, n, stream.derive(0))
        # a deterministic CAVI start keeps the n=1 case well defined
        start = VariationalState(spec.true_means + 0.5, np.full((2, p), sigma2), np.full((n, 2), 0.5))
        fit = cavi_fit(data, sigma2, init=start, tol=1e-12, max_iter=2000)
        base = DiagGaussian(fit.state.m.reshape(-1), n * fit.state.d.reshape(-1), n)
        for j, s in enumerate(scales):
            q = DiagGaussian(base.m, base.v * s, n)
            g = functional_gap(q, data, sigma2, mc_samples, stream.derive(1).derive(j))
            gap_rows.append((label, n, p, w, sigma2, s, g.gap, g.std_error, g.c_x, g.kl_term, g.elbo_p,
                             g.gap >= -4.0 * g.std_error))
            state = _state_from_q(q, p, data)
            elbo_p = elbo_profiled(q, data, sigma2)
            prng = stream.derive(2).derive(j).gen
            for t in range(perturbations):
                noise = prng.standard_normal(state.phi.shape)
                phi = state.phi * np.exp(0.5 * noise)
                phi /= phi.sum(axis=1, keepdims=True)
                other = elbo_closed_form(VariationalState(state.m, state.d, phi), data, sigma2)
                dom_rows.append((label, s, t, elbo_p, other, other <= elbo_p + 1e-9 * (1 + abs(elbo_p))))
    _write_csv(out / "bridge_gap.csv",
               ["case", "n", "p", "w", "sigma2", "v_scale", "gap", "std_error", "c_x", "kl_term",
                "elbo_p", "ok"], gap_rows)
    _write_csv(out / "bridge_dominance.csv",
               ["case", "v_scale", "trial", "elbo_p", "elbo_perturbed", "ok"], dom_rows)
    return gap_rows, dom_rows


def diagnose_single(config: ExperimentConfig, replication: int = 0) -> DiagnosticsReport:
    """Diagnostics for the first grid cell, one replication."""
    cell = next(config.cells())
    n, p, sigma2, w = cell
    V = _information("diagnose", p, w, sigma2, config).by_hessian
    index = stable_index("diagnose", n, p, sigma2, w, replication)
    stream = RngStream(int(config.master_seed), index)
    spec = GmmSpec.symmetric(p, w, sigma2)
    data = sample_dataset(spec, n, stream.derive(0))
    fit = cavi_fit(data, sigma2, init=config.init_policy, tol=config.tol, max_iter=config.max_iter,
                   rng=stream.derive(1), restarts=config.restarts, spec=spec)
    return diagnose_fit(spec, data, fit, V, float(config.eta), int(config.mc["tv_samples"]),
                        int(config.mc["tail_samples"]), stream)
