import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import logsumexp

from vbgmm.errors import UsageError
from vbgmm.model import (
    Dataset,
    GmmSpec,
    grad_variational_loglik,
    hessian_variational_loglik,
    information_matrix_mc,
    prop3_bounds_check,
    responsibilities,
    sample_dataset,
    separation_constant,
    variational_loglik,
)
from vbgmm.numerics import RngStream


def central_gradient(f, theta, shape):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    out = np.empty_like(theta)
    for i in range(theta.size):
        h = 1e-5 * (1 + abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (f(up.reshape(shape)) - f(dn.reshape(shape))) / (2 * h)
    return out


def central_jacobian(g, theta, shape):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    cols = []
    for i in range(theta.size):
        h = 1e-5 * (1 + abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        cols.append((g(up.reshape(shape)) - g(dn.reshape(shape))) / (2 * h))
    return np.stack(cols, axis=1)


def mixture_logpdf_direct(means, x):
    K, p = means.shape
    dens = [stats.multivariate_normal(mean=m, cov=np.eye(p)).pdf(x) for m in means]
    return math.log(sum(dens) / K)


def random_instance(g, p_max=4, K_max=3):
    p = int(g.integers(1, p_max + 1))
    K = int(g.integers(2, K_max + 1))
    means = g.normal(scale=1.5, size=(K, p))
    x = means[g.integers(K)] + g.normal(size=p)
    return means, x


class TestSpecAndData:
    def test_symmetric_means(self):
        spec = GmmSpec.symmetric(3, 2.0, 25.0)
        assert np.array_equal(spec.true_means, [[-2, -2, -2], [2, 2, 2]])
        assert np.array_equal(spec.theta_star, [-2, -2, -2, 2, 2, 2])

    def test_rejects_bad_spec(self):
        with pytest.raises(UsageError):
            GmmSpec(2, 2, np.zeros((2, 2)), prior_variance=0.0)
        with pytest.raises(UsageError):
            GmmSpec(2, 2, np.full((2, 2), np.nan))

    def test_sampling_is_deterministic(self):
        spec = GmmSpec.symmetric(2, 1.0)
        a = sample_dataset(spec, 4, RngStream(3, 9))
        b = sample_dataset(spec, 4, RngStream(3, 9))
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.assignments, b.assignments)

    def test_coincident_means_centered(self):
        spec = GmmSpec.symmetric(3, 0.0)
        n = 40000
        data = sample_dataset(spec, n, RngStream(3, 1))
        assert np.all(np.abs(data.observations.mean(axis=0)) <= 4 / math.sqrt(n))

    def test_label_proportions(self):
        data = sample_dataset(GmmSpec.symmetric(2, 10.0), 1000, RngStream(3, 2))
        frac = np.mean(data.assignments == 1)
        assert 0.45 <= frac <= 0.55
        assert set(np.unique(data.assignments)) <= {1, 2}

    def test_csv_round_trip(self, tmp_path):
        data = sample_dataset(GmmSpec.symmetric(3, 1.0), 25, RngStream(3, 3))
        path = tmp_path / "data.csv"
        data.to_csv(path)
        assert path.read_text().splitlines()[0] == "obs_id,label,x_1,x_2,x_3"
        back = Dataset.from_csv(path)
        assert np.array_equal(back.observations, data.observations)
        assert np.array_equal(back.assignments, data.assignments)

    def test_rejects_nonfinite_rows(self):
        with pytest.raises(UsageError):
            Dataset(np.array([[0.0, np.inf]]))


class TestResponsibilities:
    def test_equidistant(self):
        w = responsibilities(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([0.0, 3.0]))
        assert np.allclose(w, [0.5, 0.5], atol=1e-15)

    def test_hand_value(self):
        w = responsibilities(np.array([[-1.0], [1.0]]), np.array([1.0]))
        assert w[1] == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)

    def test_far_apart_no_overflow(self):
        means = np.array([[-30.0], [30.0]])
        w = responsibilities(means, np.array([-30.0]))
        assert abs(w[0] - 1) <= 1e-12 and w[1] <= 1e-12

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_simplex_and_equivariance(self, seed):
        g = np.random.default_rng(seed)
        means, x = random_instance(g)
        w = responsibilities(means, x)
        assert abs(w.sum() - 1) <= 1e-12
        perm = g.permutation(len(means))
        assert np.allclose(responsibilities(means[perm], x), w[perm], atol=1e-14)


class TestVariationalLoglik:
    def test_all_means_at_x(self):
        x = np.array([0.3, -1.2, 2.0])
        assert variational_loglik(np.stack([x, x]), x) == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-14)

    def test_hand_value(self):
        v = variational_loglik(np.array([[-1.0], [1.0]]), np.array([0.0]))
        assert v == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-14)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_density_and_is_label_symmetric(self, seed):
        g = np.random.default_rng(seed)
        means, x = random_instance(g)
        v = variational_loglik(means, x)
        assert v == pytest.approx(mixture_logpdf_direct(means, x), abs=1e-10)
        assert variational_loglik(means[g.permutation(len(means))], x) == pytest.approx(v, abs=1e-13)

    def test_large_separation_stays_finite(self):
        v = variational_loglik(np.array([[-1e3], [1e3]]), np.array([0.0]))
        assert math.isfinite(v)
        expected = logsumexp([-0.5e6, -0.5e6]) - math.log(2) - 0.5 * math.log(2 * math.pi)
        assert v == pytest.approx(expected, rel=1e-14)


class TestDerivatives:
    def test_gradient_zero_when_coincident(self):
        x = np.array([1.0, 2.0])
        assert np.array_equal(grad_variational_loglik(np.stack([x, x]), x), np.zeros(4))

    def test_gradient_block_decays(self):
        means = np.array([[0.0, 0.0], [40.0, 0.0]])
        x = np.array([-1.0, 0.5])
        g = grad_variational_loglik(means, x)
        assert np.linalg.norm(g[2:]) <= 1e-8 * np.linalg.norm(x - means[1])

    def test_gradient_matches_finite_differences(self):
        g = np.random.default_rng(11)
        for _ in range(50):
            means, x = random_instance(g)
            fd = central_gradient(lambda m: variational_loglik(m, x), means, means.shape)
            an = grad_variational_loglik(means, x)
            assert np.linalg.norm(an - fd) <= 1e-6 * max(1.0, np.linalg.norm(an))

    def test_hessian_matches_finite_differences(self):
        g = np.random.default_rng(12)
        for _ in range(50):
            means, x = random_instance(g)
            fd = central_jacobian(lambda m: grad_variational_loglik(m, x), means, means.shape)
            H = hessian_variational_loglik(means, x)
            assert np.max(np.abs(H - fd)) <= 1e-5
            assert np.array_equal(H, H.T)

    def test_hessian_coincident(self):
        x = np.array([0.5, -0.5])
        H = hessian_variational_loglik(np.stack([x, x, x]), x)
        assert np.allclose(H, -np.eye(6) / 3, atol=1e-15)

    def test_hessian_well_separated(self):
        means = np.array([[0.0, 0.0], [50.0, 50.0]])
        H = hessian_variational_loglik(means, means[0])
        assert np.max(np.abs(H[:2, :2] + np.eye(2))) <= 1e-6
        assert np.max(np.abs(H[2:, :])) <= 1e-6 and np.max(np.abs(H[:, 2:])) <= 1e-6


@pytest.fixture(scope="module")
def info_p3():
    return information_matrix_mc(GmmSpec.symmetric(3, 10.0), 200_000, RngStream(5, 1))


class TestInformationMatrix:
    def test_near_half_identity(self, info_p3):
        for M in (info_p3.by_variance, info_p3.by_hessian):
            assert np.max(np.abs(M - 0.5 * np.eye(6))) <= 0.02

    def test_information_equality(self, info_p3):
        assert np.max(np.abs(info_p3.by_variance - info_p3.by_hessian)) <= 0.05

    def test_symmetric_and_psd(self, info_p3):
        assert np.max(np.abs(info_p3.by_variance - info_p3.by_variance.T)) <= 1e-10
        assert np.linalg.eigvalsh(info_p3.by_variance).min() >= -1e-12

    def test_score_mean_near_zero(self, info_p3):
        bound = 4 * math.sqrt(np.trace(info_p3.by_variance) / info_p3.mc_samples)
        assert np.linalg.norm(info_p3.score_mean) <= bound

    def test_overlapping_components_psd(self):
        info = information_matrix_mc(GmmSpec.symmetric(2, 0.0), 20_000, RngStream(5, 2))
        assert np.linalg.eigvalsh(info.by_variance).min() >= -1e-12
        # at w = 0 the score is (x - 0)/K in both blocks, so V is rank deficient
        assert np.linalg.eigvalsh(info.by_hessian).min() < 0.05

    def test_repeatable(self):
        spec = GmmSpec.symmetric(2, 3.0)
        a = information_matrix_mc(spec, 12_000, RngStream(5, 3), chunk=5_000)
        b = information_matrix_mc(spec, 12_000, RngStream(5, 3), chunk=5_000)
        assert np.array_equal(a.by_hessian, b.by_hessian)

    def test_rejects_tiny_sample(self):
        with pytest.raises(UsageError):
            information_matrix_mc(GmmSpec.symmetric(2, 3.0), 10, RngStream(5, 3))


class TestSeparationBounds:
    def test_far_apart(self):
        spec = GmmSpec.symmetric(5, 10.0)
        info = information_matrix_mc(spec, 100_000, RngStream(6, 1))
        report = prop3_bounds_check(spec, info)
        assert report["C"] <= 1e-100
        assert report["lower"] == pytest.approx(0.5) and report["upper"] == 0.5
        assert report["satisfied"]

    def test_zero_separation_inapplicable(self):
        spec = GmmSpec.symmetric(2, 0.0)
        info = information_matrix_mc(spec, 5_000, RngStream(6, 2))
        report = prop3_bounds_check(spec, info)
        # each pair contributes (0 + 4p)/4 = p
        assert report["C"] == pytest.approx(2.0)
        assert not report["applicable"] and not report["satisfied"]

    def test_three_components(self):
        d = 8.0
        means = np.array([[0.0, 0.0], [d, 0.0], [d / 2, d * math.sqrt(3) / 2]])
        spec = GmmSpec(2, 3, means)
        expected = 3 * (d * d + 8) / 4 * math.exp(-d * d / 8)
        assert separation_constant(means) == pytest.approx(expected, rel=1e-14)
        info = information_matrix_mc(spec, 100_000, RngStream(6, 3))
        report = prop3_bounds_check(spec, info)
        assert report["applicable"]
        eig_lo, eig_hi = report["eigen_range"]
        assert eig_hi <= report["upper"] + report["tolerance"]
        assert eig_lo >= report["lower"] - report["tolerance"]
        assert report["satisfied"]
