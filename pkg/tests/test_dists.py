import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import numerical_grad
from overhead_counts.dists import (
    CountParams,
    expected_count,
    link,
    nll_gaussian,
    nll_gaussian_grad,
    nll_matrix,
    nll_negbinomial,
    nll_negbinomial_grad,
    nll_poisson,
    nll_poisson_grad,
    pmf_oracle,
    raw_loss_and_grad,
    sample_nll,
    softplus,
    softplus_grad,
)
from overhead_counts.counts import ObjectHistogram
from overhead_counts.errors import DomainError, NumericError, ShapeError

LN2 = math.log(2.0)


class TestSoftplus:
    """The positivity link."""

    def test_at_zero(self):
        assert softplus(0.0) == pytest.approx(LN2, abs=1e-15)
        assert softplus_grad(0.0) == 0.5

    def test_linear_regime(self):
        assert abs(softplus(100.0) - 100.0) < 1e-12
        assert softplus(1000.0) == pytest.approx(1000.0)

    def test_no_overflow_for_large_negative(self):
        value = softplus(-800.0)
        assert value >= 0.0
        assert math.isfinite(value)

    def test_bounds(self):
        x = np.linspace(-30, 60, 1001)
        y = softplus(x)
        assert np.all(y > 0)
        assert np.all(y > x)
        g = softplus_grad(np.linspace(-30, 30, 101))
        assert np.all((g > 0) & (g < 1))

    def test_continuous_at_cutoff(self):
        assert softplus(30.0 + 1e-9) == pytest.approx(softplus(30.0 - 1e-9), rel=1e-12)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NumericError):
            softplus(bad)
        with pytest.raises(NumericError):
            softplus_grad(bad)

    def test_array_input_keeps_shape(self):
        assert softplus(np.zeros((2, 3))).shape == (2, 3)


class TestPoisson:
    """Poisson NLL and gradient."""

    def test_known_values(self):
        assert nll_poisson(1.0, 0) == pytest.approx(1.0, abs=1e-15)
        assert nll_poisson(2.0, 2) == pytest.approx(1.30685, abs=1e-5)
        assert nll_poisson(2.0, 2) == pytest.approx(-math.log(pmf_oracle("poisson", (2.0,), 2)), rel=1e-12)

    def test_gradient_zero_at_count(self):
        assert nll_poisson_grad(5.0, 5) == 0.0

    def test_minimum_at_count(self):
        for k in (1, 3, 10):
            assert nll_poisson_grad(k * 0.999, k) < 0 < nll_poisson_grad(k * 1.001, k)

    def test_large_count_uses_log_gamma(self):
        assert math.isfinite(nll_poisson(2.63, 500))

    @pytest.mark.parametrize("rate", [0.0, -1.0])
    def test_non_positive_rate(self, rate):
        with pytest.raises(DomainError):
            nll_poisson(rate, 1)


class TestNegativeBinomial:
    """Mean-dispersion negative binomial."""

    def test_geometric_case(self):
        assert nll_negbinomial(1.0, 1.0, 0) == pytest.approx(LN2, abs=1e-14)

    def test_poisson_limit(self):
        assert nll_negbinomial(1e6, 2.0, 3) == pytest.approx(nll_poisson(2.0, 3), abs=1e-4)

    def test_matches_direct_formula(self):
        r, m, k = 2.5, 1.7, 4
        direct = math.gamma(k + r) / (math.factorial(k) * math.gamma(r)) * (r / (r + m)) ** r * (m / (r + m)) ** k
        assert nll_negbinomial(r, m, k) == pytest.approx(-math.log(direct), rel=1e-12)

    def test_overdispersed(self, rng):
        r = rng.uniform(0.1, 10, 50)
        m = rng.uniform(0.1, 10, 50)
        assert np.all(m + m * m / r > m)

    @pytest.mark.parametrize("r,m", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
    def test_non_positive_parameters(self, r, m):
        with pytest.raises(DomainError):
            nll_negbinomial(r, m, 1)


class TestGaussian:
    """Gaussian density at integer counts."""

    def test_at_mean(self):
        assert nll_gaussian(1.0, 1.0, 1) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)
        d_mu, _ = nll_gaussian_grad(1.0, 1.0, 1)
        assert d_mu == 0.0

    def test_matches_density(self):
        density = math.exp(-((3 - 2.0) ** 2) / (2 * 0.25)) / (0.5 * math.sqrt(2 * math.pi))
        assert nll_gaussian(2.0, 0.5, 3) == pytest.approx(-math.log(density), abs=1e-10)

    def test_non_positive_sigma(self):
        with pytest.raises(DomainError):
            nll_gaussian(1.0, 0.0, 1)


class TestParameterGradients:
    """Analytic gradients wrt distribution parameters against central differences."""

    CASES = 100

    def test_poisson(self, rng):
        for _ in range(self.CASES):
            lam = np.array([rng.uniform(0.1, 10.0)])
            k = int(rng.integers(0, 15))
            fd = numerical_grad(lambda: nll_poisson(lam[0], k), lam)
            assert_allclose(nll_poisson_grad(lam[0], k), fd[0], rtol=1e-6, atol=1e-8)

    def test_negbinomial(self, rng):
        for _ in range(self.CASES):
            theta = np.array([rng.uniform(0.2, 10.0), rng.uniform(0.1, 10.0)])
            k = int(rng.integers(0, 15))
            fd = numerical_grad(lambda: nll_negbinomial(theta[0], theta[1], k), theta)
            assert_allclose(nll_negbinomial_grad(theta[0], theta[1], k), fd, rtol=1e-6, atol=1e-8)

    def test_gaussian(self, rng):
        for _ in range(self.CASES):
            theta = np.array([rng.uniform(0.1, 10.0), rng.uniform(0.3, 5.0)])
            k = int(rng.integers(0, 15))
            fd = numerical_grad(lambda: nll_gaussian(theta[0], theta[1], k), theta)
            assert_allclose(nll_gaussian_grad(theta[0], theta[1], k), fd, rtol=1e-6, atol=1e-8)


class TestRawGradients:
    """Gradients of the mean batch NLL wrt pre-link head outputs."""

    @pytest.mark.parametrize("family,heads", [("poisson", 1), ("nb", 2), ("gaussian", 2)])
    def test_against_finite_differences(self, rng, family, heads):
        for _ in range(100):
            raw = [rng.uniform(-2.0, 3.0, size=(2, 3)) for _ in range(heads)]
            counts = rng.integers(0, 8, size=(2, 3)).astype(float)
            _, grads = raw_loss_and_grad(family, raw, counts)
            for j in range(heads):
                fd = numerical_grad(lambda: raw_loss_and_grad(family, raw, counts)[0], raw[j])
                assert_allclose(grads[j], fd, rtol=1e-6, atol=1e-8)

    def test_floored_entries_get_no_gradient(self):
        raw = [np.array([[-50.0, 0.0]])]
        _, (grad,) = raw_loss_and_grad("poisson", raw, np.array([[3.0, 3.0]]))
        assert grad[0, 0] == 0.0
        assert grad[0, 1] != 0.0


class TestPmfOracle:
    """exp(-NLL) against direct pmf/density evaluation."""

    def test_poisson_at_zero(self):
        assert pmf_oracle("poisson", (1.0,), 0) == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_likelihood_consistency(self, rng):
        for _ in range(100):
            k = int(rng.integers(0, 25))
            lam = rng.uniform(0.1, 10.0)
            r, m = rng.uniform(0.2, 10.0), rng.uniform(0.1, 10.0)
            mu, sigma = rng.uniform(0.1, 10.0), rng.uniform(0.3, 5.0)
            assert_allclose(math.exp(-nll_poisson(lam, k)), pmf_oracle("poisson", (lam,), k), rtol=1e-10)
            assert_allclose(math.exp(-nll_negbinomial(r, m, k)), pmf_oracle("nb", (r, m), k), rtol=1e-10)
            assert_allclose(math.exp(-nll_gaussian(mu, sigma, k)), pmf_oracle("gaussian", (mu, sigma), k), rtol=1e-10)

    def test_poisson_sums_to_one(self):
        assert sum(pmf_oracle("poisson", (3.0,), k) for k in range(201)) == pytest.approx(1.0, abs=1e-9)

    def test_negbinomial_sums_to_one(self):
        assert sum(pmf_oracle("nb", (2.5, 1.7), k) for k in range(501)) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("family,params,mean", [
        ("poisson", (20.0,), 20.0),
        ("poisson", (0.5,), 0.5),
        ("nb", (5.0, 20.0), 20.0),
        ("nb", (0.8, 3.0), 3.0),
    ])
    def test_truncated_sums(self, family, params, mean):
        upper = int(math.ceil(mean + 40 * math.sqrt(mean)))
        total = sum(pmf_oracle(family, params, k) for k in range(upper + 1))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            pmf_oracle("poisson", (0.0,), 1)
        with pytest.raises(DomainError):
            pmf_oracle("nb", (1.0, -1.0), 1)
        with pytest.raises(DomainError):
            pmf_oracle("gaussian", (1.0, 1.0), -1)


class TestCountParams:
    """Parameter containers, link and reductions."""

    def test_expected_count(self):
        assert_allclose(expected_count(CountParams("poisson", [2.0, 3.0])), [2.0, 3.0])
        assert_allclose(expected_count(CountParams("nb", [4.0], [5.0])), [4.0])
        assert_allclose(expected_count(CountParams("gaussian", [1.2], [9.0])), [1.2])

    def test_named_views(self):
        nb = CountParams("NB", [4.0], [5.0])
        assert nb.family == "nb"
        assert_allclose(nb.dispersion, [5.0])
        assert nb.stddev is None
        assert CountParams("poisson", [1.0]).dispersion is None

    def test_spread_required_for_two_head_families(self):
        with pytest.raises(ShapeError, match="takes 2"):
            CountParams("gaussian", [1.0])
        with pytest.raises(ShapeError, match="takes 1"):
            CountParams("poisson", [1.0], [1.0])

    def test_non_positive_rejected(self):
        with pytest.raises(DomainError):
            CountParams("poisson", [1.0, 0.0])

    def test_link_is_floored_and_positive(self):
        params = link("nb", [np.array([-1000.0, 0.0]), np.array([5.0, -40.0])])
        assert np.all(params.mean >= 1e-8)
        assert np.all(params.spread >= 1e-8)
        assert params.mean[1] == pytest.approx(LN2)

    def test_link_head_count(self):
        with pytest.raises(ShapeError, match="expects 2"):
            link("gaussian", [np.zeros(3)])

    def test_sample_nll_all_ones(self):
        params = CountParams("poisson", np.ones(4))
        assert sample_nll(params, ObjectHistogram((0, 0, 0, 0))) == 1.0

    def test_sample_nll_single_category(self):
        params = CountParams("nb", [1.7], [2.5])
        assert sample_nll(params, ObjectHistogram((4,))) == pytest.approx(nll_negbinomial(2.5, 1.7, 4), rel=1e-15)

    def test_sample_nll_loop_oracle(self, rng):
        mean = rng.uniform(0.1, 5.0, 6)
        spread = rng.uniform(0.3, 3.0, 6)
        counts = tuple(int(c) for c in rng.integers(0, 6, 6))
        params = CountParams("gaussian", mean, spread)
        terms = [nll_gaussian(mean[c], spread[c], counts[c]) for c in range(6)]
        assert sample_nll(params, ObjectHistogram(counts)) == pytest.approx(sum(terms) / 6, rel=1e-12)

    def test_sample_nll_length_mismatch(self):
        with pytest.raises(ShapeError):
            sample_nll(CountParams("poisson", np.ones(3)), ObjectHistogram((1, 2)))

    def test_nll_matrix_shape_check(self):
        with pytest.raises(ShapeError):
            nll_matrix(CountParams("poisson", np.ones((2, 3))), np.zeros((3, 2)))

    def test_row(self):
        params = CountParams("gaussian", [[1.0, 2.0], [3.0, 4.0]], [[0.5, 0.5], [1.0, 1.0]])
        row = params.row(1)
        assert_allclose(row.mean, [3.0, 4.0])
        assert_allclose(row.spread, [1.0, 1.0])
