import json
import math

import numpy as np
import pytest

from vbgmm.cavi import (
    VariationalState,
    cavi_fit,
    cavi_update,
    elbo_closed_form,
    elbo_monte_carlo,
    initial_state,
    mse,
    phi_update,
)
from vbgmm.errors import NumericalError, UsageError
from vbgmm.model import Dataset, GmmSpec, sample_dataset
from vbgmm.numerics import RngStream, align_to_reference

LOG_2PI = math.log(2 * math.pi)


def random_state(g, n, p, K=2):
    m = g.normal(scale=2.0, size=(K, p))
    d = np.repeat(g.uniform(0.05, 2.0, size=(K, 1)), p, axis=1)
    phi = g.dirichlet(np.ones(K), size=n)
    return VariationalState(m, d, phi)


def dataset(n, p, w, seed=0, sigma2=25.0):
    spec = GmmSpec.symmetric(p, w, sigma2)
    return spec, sample_dataset(spec, n, RngStream(seed, n * 1000 + p))


class TestClosedFormElbo:
    def test_hand_value(self):
        data = Dataset(np.zeros((1, 1)))
        state = VariationalState(np.zeros((2, 1)), np.ones((2, 1)), np.full((1, 2), 0.5))
        assert elbo_closed_form(state, data, 1.0) == pytest.approx(-0.5 - 0.5 * LOG_2PI, abs=1e-14)

    def test_shift_only_moves_prior_terms(self):
        g = np.random.default_rng(1)
        _, data = dataset(15, 3, 1.0)
        state = random_state(g, data.n, data.p)
        c = np.array([0.7, -1.3, 2.0])
        sigma2 = 4.0
        shifted = VariationalState(state.m + c, state.d, state.phi)
        diff = elbo_closed_form(shifted, Dataset(data.observations + c), sigma2) - elbo_closed_form(state, data, sigma2)
        prior_only = -(((state.m + c) ** 2).sum() - (state.m**2).sum()) / (2 * sigma2)
        assert diff == pytest.approx(prior_only, abs=1e-9)

    def test_underflowed_phi_counts_as_zero(self):
        data = Dataset(np.array([[0.0], [1.0]]))
        state = VariationalState(np.zeros((2, 1)), np.ones((2, 1)), np.array([[1.0, 0.0], [0.5, 0.5]]))
        assert math.isfinite(elbo_closed_form(state, data, 1.0))


class TestMonteCarloElbo:
    def test_agrees_with_closed_form(self):
        g = np.random.default_rng(2)
        for trial in range(10):
            p = int(g.integers(1, 4))
            n = int(g.integers(2, 21))
            _, data = dataset(n, p, float(g.uniform(0, 3)), seed=trial)
            state = random_state(g, n, p)
            est, se = elbo_monte_carlo(state, data, 2.0, 20_000, RngStream(9, trial))
            assert abs(est - elbo_closed_form(state, data, 2.0)) <= 4 * se

    def test_std_error_scales(self):
        g = np.random.default_rng(3)
        _, data = dataset(10, 2, 1.0)
        state = random_state(g, 10, 2)
        _, se1 = elbo_monte_carlo(state, data, 2.0, 10_000, RngStream(9, 100))
        _, se2 = elbo_monte_carlo(state, data, 2.0, 20_000, RngStream(9, 101))
        assert se2 / se1 == pytest.approx(1 / math.sqrt(2), rel=0.2)

    def test_deterministic(self):
        g = np.random.default_rng(4)
        _, data = dataset(8, 2, 1.0)
        state = random_state(g, 8, 2)
        a = elbo_monte_carlo(state, data, 2.0, 2_000, RngStream(9, 5))
        b = elbo_monte_carlo(state, data, 2.0, 2_000, RngStream(9, 5))
        assert a == b


class TestUpdate:
    def test_fixed_point(self):
        spec, data = dataset(300, 2, 3.0)
        state = initial_state(data, 25.0, "truth", RngStream(1, 1), spec)
        for _ in range(300):
            state = cavi_update(state, data, 25.0)
        again = cavi_update(state, data, 25.0)
        for a, b in ((state.m, again.m), (state.d, again.d), (state.phi, again.phi)):
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_preserves_mirror_symmetry(self):
        g = np.random.default_rng(5)
        half = g.normal(size=(20, 2)) + 1.0
        data = Dataset(np.concatenate([half, -half]))
        m1 = np.array([0.8, 1.1])
        phi_half = g.dirichlet([1, 1], size=20)
        phi = np.concatenate([phi_half, phi_half[:, ::-1]])
        state = VariationalState(np.stack([m1, -m1]), np.full((2, 2), 0.4), phi)
        out = cavi_update(state, data, 9.0)
        assert np.allclose(out.m[1], -out.m[0], atol=1e-12)
        assert np.allclose(out.d[0], out.d[1], atol=1e-14)
        assert np.allclose(out.phi[20:], out.phi[:20, ::-1], atol=1e-12)

    def test_single_observation_flat_prior(self):
        x = np.array([[1.7, -0.4]])
        state = VariationalState(np.array([[1.5, -0.5], [1e3, 1e3]]), np.ones((2, 2)), np.full((1, 2), 0.5))
        out = cavi_update(state, Dataset(x), 1e12)
        assert np.allclose(out.m[0], x[0], atol=1e-6)

    def test_isotropy_and_simplex(self):
        g = np.random.default_rng(6)
        _, data = dataset(50, 4, 1.0)
        state = random_state(g, 50, 4)
        for _ in range(5):
            state = cavi_update(state, data, 3.0)
            assert np.all(state.d.max(axis=1) - state.d.min(axis=1) == 0)
            assert np.all(state.d > 0)
            assert np.all(state.phi > 0)
            assert np.max(np.abs(state.phi.sum(axis=1) - 1)) <= 1e-12

    def test_phi_uses_each_components_own_trace(self):
        data = Dataset(np.array([[0.0, 0.0]]))
        state = VariationalState(np.zeros((2, 2)), np.array([[0.1, 0.1], [2.0, 2.0]]), np.full((1, 2), 0.5))
        phi = phi_update(state, data)
        # the tighter component wins: logits differ by (tr D_2 - tr D_1) / 2
        assert phi[0, 0] == pytest.approx(1 / (1 + math.exp(-(4.0 - 0.2) / 2)), rel=1e-12)

    def test_rejects_three_components(self):
        _, data = dataset(10, 2, 1.0)
        state = VariationalState(np.zeros((3, 2)), np.ones((3, 2)), np.full((10, 3), 1 / 3))
        with pytest.raises(UsageError):
            cavi_update(state, data, 1.0)


class TestElboMonotone:
    @pytest.mark.parametrize("n, p, w, sigma2", [(50, 2, 0.0, 1.0), (50, 2, 1.0, 25.0), (200, 5, 2.0, 1.0),
                                                 (100, 10, 10.0, 25.0), (30, 1, 0.5, 100.0)])
    def test_every_sweep(self, n, p, w, sigma2):
        _, data = dataset(n, p, w, sigma2=sigma2)
        for r in range(3):
            fit = cavi_fit(data, sigma2, init="data", tol=1e-14, max_iter=300, rng=RngStream(8, r))
            trace = np.array(fit.elbo_trace)
            assert np.all(np.diff(trace) >= -1e-9)


class TestFit:
    def test_well_separated_recovers_means(self):
        spec, data = dataset(1000, 2, 10.0)
        fit = cavi_fit(data, 25.0, rng=RngStream(1, 2), spec=spec)
        assert fit.converged and fit.iterations <= 50
        aligned, _ = align_to_reference(fit.state.m, spec.true_means)
        assert np.max(np.abs(aligned - spec.true_means)) <= 0.2

    def test_single_sweep(self):
        _, data = dataset(100, 2, 1.0)
        fit = cavi_fit(data, 25.0, max_iter=1, tol=0.0, rng=RngStream(1, 3))
        assert fit.iterations == 1 and len(fit.elbo_trace) == 1 and not fit.converged

    def test_deterministic(self):
        _, data = dataset(100, 2, 2.0)
        a = cavi_fit(data, 25.0, rng=RngStream(1, 4), restarts=3)
        b = cavi_fit(data, 25.0, rng=RngStream(1, 4), restarts=3)
        assert a.elbo_trace == b.elbo_trace and np.array_equal(a.state.m, b.state.m)

    def test_restarts_keep_best_elbo(self):
        _, data = dataset(60, 2, 1.0)
        best = cavi_fit(data, 25.0, rng=RngStream(1, 5), restarts=4)
        singles = [cavi_fit(data, 25.0, rng=RngStream(1, 5).derive(r)).final_elbo for r in range(4)]
        assert best.final_elbo == max(singles)

    def test_label_swap_equivariance(self):
        spec, data = dataset(400, 3, 2.0)
        start = initial_state(data, 25.0, "data", RngStream(1, 6))
        a = cavi_fit(data, 25.0, init=start)
        b = cavi_fit(data, 25.0, init=start.swapped([1, 0]))
        assert np.allclose(a.state.m, b.state.m[::-1], atol=1e-9)
        assert a.final_elbo == pytest.approx(b.final_elbo, abs=1e-9)
        assert mse(a.state.m, spec) == pytest.approx(mse(b.state.m, spec), abs=1e-12)

    def test_fixed_point_consistency(self):
        spec, data = dataset(500, 2, 10.0)
        tol = 1e-10
        fit = cavi_fit(data, 25.0, tol=tol, rng=RngStream(1, 7), spec=spec)
        extra = cavi_update(fit.state, data, 25.0)
        for a, b in ((fit.state.m, extra.m), (fit.state.d, extra.d), (fit.state.phi, extra.phi)):
            assert np.max(np.abs(a - b)) <= 10 * tol

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_elbo_raises(self):
        data = Dataset(np.array([[1e200], [-1e200], [3e200]]))
        with pytest.raises(NumericalError) as info:
            cavi_fit(data, 1.0, rng=RngStream(1, 8))
        assert info.value.iteration == 1

    def test_bad_arguments(self):
        _, data = dataset(10, 2, 1.0)
        with pytest.raises(UsageError):
            cavi_fit(data, 1.0, max_iter=0, rng=RngStream(1, 9))
        with pytest.raises(UsageError):
            cavi_fit(data, 1.0, init="kmeans", rng=RngStream(1, 9))
        with pytest.raises(UsageError):
            cavi_fit(data, 1.0)

    def test_export(self, tmp_path):
        spec, data = dataset(100, 2, 10.0)
        fit = cavi_fit(data, 25.0, rng=RngStream(1, 10), spec=spec)
        fit.export(tmp_path, spec)
        lines = (tmp_path / "fit_trace.csv").read_text().splitlines()
        assert lines[0] == "sweep,elbo" and len(lines) == fit.iterations + 1
        summary = json.loads((tmp_path / "fit_summary.json").read_text())
        assert set(summary) == {"iterations", "converged", "mse", "final_elbo", "seed"}
        assert summary["mse"] == pytest.approx(mse(fit.state.m, spec))


class TestMse:
    def test_truth(self):
        spec = GmmSpec.symmetric(2, 3.0)
        assert mse(spec.true_means, spec) == 0
        assert mse(spec.true_means[::-1], spec) == 0

    def test_small_offset(self):
        spec = GmmSpec.symmetric(2, 3.0)
        m = spec.true_means.copy()
        m[0] += [0.1, 0.0]
        assert mse(m, spec) == pytest.approx(0.005, abs=1e-15)
