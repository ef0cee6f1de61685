"""Distribution-family unit tests: closed forms against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from otbayes import (
    DiscreteMeasure,
    Exponential,
    Generator,
    GridQuantile,
    GridUnivariate,
    Gumbel,
    Laplace,
    Logistic,
    MatrixNotPDError,
    Normal,
    QuantileMixModel,
    StudentT,
    experiment_covariance,
    make_ls_model,
    mix_quantiles,
    model_from_dict,
    sample,
)

ALL_PARAMETRIC = [
    Normal(0.3, 1.7),
    Laplace(-1.0, 0.8),
    StudentT(3.0, 0.5, 1.2),
    Exponential(2.5),
    Logistic(0.0, 0.6),
    Gumbel(1.0, 2.0),
]


class TestQuantiles:
    def test_normal_median_is_zero(self):
        assert Normal(0, 1).quantile(0.5) == pytest.approx(0.0, abs=1e-12)

    def test_exponential_quantile_analytic_inverse(self):
        # F(x) = 1 - exp(-x) inverted by hand at x = 1
        u = 1.0 - math.exp(-1.0)
        assert Exponential(1.0).quantile(u) == pytest.approx(1.0, abs=1e-12)

    def test_grid_quantile_linear_midpoint(self):
        g = GridQuantile([0.25, 0.75], [-1.0, 1.0])
        assert g(0.5) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5])
    def test_quantile_domain_errors(self, u):
        with pytest.raises(ValueError):
            Normal(0, 1).quantile(u)

    @pytest.mark.parametrize("model", ALL_PARAMETRIC, ids=lambda m: m.family)
    def test_quantile_cdf_roundtrip(self, model):
        u = np.linspace(0.01, 0.99, 99)
        assert np.max(np.abs(model.cdf(model.quantile(u)) - u)) < 1e-9

    @pytest.mark.parametrize("model", ALL_PARAMETRIC, ids=lambda m: m.family)
    def test_quantile_nondecreasing(self, model):
        u = np.linspace(0.001, 0.999, 500)
        assert np.all(np.diff(model.quantile(u)) >= 0.0)

    @pytest.mark.parametrize("model", ALL_PARAMETRIC, ids=lambda m: m.family)
    def test_density_normalized(self, model):
        lo, hi = model.quantile(1e-9), model.quantile(1.0 - 1e-9)
        val, _ = integrate.quad(lambda x: model.pdf(x), lo, hi, limit=200)
        assert val == pytest.approx(1.0, abs=1e-6)
        x = np.linspace(lo, hi, 200)
        assert np.all(model.pdf(x) >= 0.0)


class TestGridQuantile:
    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            GridQuantile([0.5], [0.0])  # single knot
        with pytest.raises(ValueError):
            GridQuantile([0.0, 0.5], [0.0, 1.0])  # knot at 0
        with pytest.raises(ValueError):
            GridQuantile([0.2, 0.2], [0.0, 1.0])  # not strictly increasing
        with pytest.raises(ValueError):
            GridQuantile([0.2, 0.8], [1.0, 0.0])  # decreasing values

    @given(
        st.lists(st.floats(0.01, 0.99), min_size=2, max_size=30, unique=True),
        st.lists(st.floats(-50, 50), min_size=2, max_size=30),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone_by_construction(self, knots, values):
        knots = sorted(knots)
        values = sorted(values[: len(knots)])
        if len(values) < len(knots):
            return
        g = GridQuantile(knots, values)
        u = np.linspace(0.001, 0.999, 101)
        assert np.all(np.diff(g(u)) >= -1e-12)

    def test_inverse_roundtrip(self):
        g = GridQuantile([0.1, 0.4, 0.9], [-2.0, 0.5, 3.0])
        u = np.linspace(0.1, 0.9, 33)
        assert np.allclose(g.inverse(g(u)), u, atol=1e-12)

    def test_grid_model_moments(self):
        # grid built from an exact normal should reproduce its moments
        from otbayes import default_levels

        u = default_levels()
        m = GridUnivariate(GridQuantile(u, Normal(2.0, 3.0).quantile(u)))
        assert m.mean() == pytest.approx(2.0, abs=1e-3)
        assert m.variance() == pytest.approx(9.0, rel=1e-2)


class TestQuantileMix:
    def test_same_family_collapses_to_parametric(self):
        m = mix_quantiles([0.5, 0.5], [Normal(0, 1), Normal(2, 3)])
        assert isinstance(m, Normal)
        assert m.loc == pytest.approx(1.0)
        assert m.scale == pytest.approx(2.0)

    def test_exponential_mix_stays_exponential(self):
        m = mix_quantiles([0.5, 0.5], [Exponential(1.0), Exponential(0.5)])
        assert isinstance(m, Exponential)
        assert m.scale == pytest.approx(1.5)

    def test_mixed_families_exact_quantile(self):
        parts = [Normal(0, 1), Laplace(1, 2)]
        m = mix_quantiles([0.3, 0.7], parts)
        assert isinstance(m, QuantileMixModel)
        u = np.linspace(0.01, 0.99, 50)
        expected = 0.3 * parts[0].quantile(u) + 0.7 * parts[1].quantile(u)
        assert np.allclose(m.quantile(u), expected, atol=0.0)

    def test_flattening_keeps_depth_one(self):
        inner = mix_quantiles([0.5, 0.5], [Normal(0, 1), Laplace(0, 1)])
        outer = mix_quantiles([0.5, 0.5], [inner, Gumbel(0, 1)])
        assert all(not isinstance(c, QuantileMixModel) for c in outer.components)

    def test_cdf_inverts_quantile(self):
        m = mix_quantiles([0.4, 0.6], [Normal(0, 1), Logistic(2, 1)])
        for u in (0.05, 0.3, 0.62, 0.97):
            assert m.cdf(m.quantile(u)) == pytest.approx(u, abs=1e-10)

    def test_mean_linear(self):
        m = mix_quantiles([0.25, 0.75], [Normal(4, 1), Laplace(-2, 1)])
        assert m.mean() == pytest.approx(0.25 * 4 - 0.75 * 2, abs=1e-12)


class TestMakeLsModel:
    def test_identity(self):
        gen = Generator.standard_normal(2)
        m = make_ls_model(gen, [0.0, 0.0], np.eye(2))
        assert np.allclose(m.scatter, np.eye(2), atol=1e-14)

    def test_diagonal_root(self):
        gen = Generator.standard_normal(2)
        m = make_ls_model(gen, [0.0, 0.0], np.diag([4.0, 9.0]))
        assert np.allclose(m.scatter, np.diag([2.0, 3.0]), atol=1e-12)

    def test_root_squares_back(self):
        gen = Generator.standard_normal(2)
        sigma = np.array([[2.0, 1.0], [1.0, 2.0]])
        m = make_ls_model(gen, [0.0, 0.0], sigma)
        assert np.max(np.abs(m.scatter @ m.scatter - sigma)) < 1e-10

    def test_non_pd_reports_smallest_eigenvalue(self):
        gen = Generator.standard_normal(2)
        with pytest.raises(MatrixNotPDError) as err:
            make_ls_model(gen, [0.0, 0.0], np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert err.value.smallest_eigenvalue == pytest.approx(-1.0, abs=1e-12)

    def test_mean_and_covariance_for_standardized_generator(self):
        gen = Generator.standard_normal(3)
        sigma = np.diag([1.0, 2.0, 3.0])
        m = make_ls_model(gen, [1.0, 2.0, 3.0], sigma)
        assert np.allclose(m.mean(), [1.0, 2.0, 3.0])
        assert np.allclose(m.covariance(), sigma, atol=1e-12)


class TestExperimentCovariance:
    def test_diagonal_entries(self):
        for eps, sig, om in [(0.01, 1.0, 5.652), (0.5, 2.0, 0.7)]:
            mat = experiment_covariance(8, eps, sig, om)
            assert np.allclose(np.diag(mat), eps + sig, atol=1e-14)

    def test_reference_parameter_corner(self):
        mat = experiment_covariance(15, 0.01, 1.0, 5.652)
        assert mat[0, 0] == pytest.approx(1.01, abs=1e-12)
        assert mat.shape == (15, 15)

    def test_omega_zero_rank_one_plus_ridge(self):
        q, eps, sig = 6, 0.3, 2.0
        mat = experiment_covariance(q, eps, sig, 0.0)
        assert np.allclose(mat, eps * np.eye(q) + sig * np.ones((q, q)), atol=1e-14)
        vals = np.sort(np.linalg.eigvalsh(mat))
        expected = np.sort([eps + q * sig] + [eps] * (q - 1))
        assert np.allclose(vals, expected, atol=1e-10)

    @pytest.mark.parametrize("eps,sig,om", [(0.01, 1.0, 5.652), (1.0, 0.1, 20.0),
                                            (0.2, 3.0, 1.0), (0.05, 0.5, 12.3)])
    def test_symmetric_positive_definite(self, eps, sig, om):
        mat = experiment_covariance(15, eps, sig, om)
        assert np.allclose(mat, mat.T)
        assert np.linalg.eigvalsh(mat)[0] > 0.0

    def test_q_one(self):
        assert experiment_covariance(1, 0.1, 2.0, 3.0) == pytest.approx(np.array([[2.1]]))


class TestSampling:
    def test_ls_identity_pushforward_matches_generator(self):
        rng = np.random.default_rng(11)
        gen = Generator.standard_normal(3)
        m = make_ls_model(gen, np.zeros(3), np.eye(3))
        cloud = sample(m, 4000, rng)
        assert np.max(np.abs(cloud.points.mean(axis=0))) < 4.0 / math.sqrt(4000)

    def test_normal_sample_variance_band(self):
        rng = np.random.default_rng(5)
        cloud = sample(Normal(0, 1), 100_000, rng)
        assert 0.97 < cloud.points.var() < 1.03

    def test_uniform_weights_exact(self):
        rng = np.random.default_rng(0)
        cloud = sample(Normal(0, 1), 7, rng)
        assert np.all(cloud.weights == 1.0 / 7)

    def test_copula_and_spherical_samplers_run(self):
        from otbayes import CopulaModel, GaussianCopula, RadialProfile, SphericalModel

        rng = np.random.default_rng(3)
        cop = CopulaModel(GaussianCopula([[1.0, 0.5], [0.5, 1.0]]), [Normal(0, 1), Normal(0, 1)])
        pts = cop.sample(2000, rng)
        corr = np.corrcoef(pts.T)[0, 1]
        assert 0.3 < corr < 0.65  # Gaussian copula with normal marginals keeps rho

        gen = Generator.standard_normal(2)
        sph = SphericalModel(gen, RadialProfile([0.0, 10.0], [0.0, 20.0]))
        pts = sph.sample(2000, rng)
        # alpha(r) = 2r doubles every norm relative to the generator
        assert np.mean(np.linalg.norm(pts, axis=1)) == pytest.approx(
            2.0 * stats.chi(df=2).mean(), rel=0.05)


class TestGeneratorStandardization:
    def test_normal_coordinates_standardized_monte_carlo(self):
        rng = np.random.default_rng(21)
        gen = Generator.mixed_experiment(15)
        draws = gen.sample(100_000, rng)
        means = draws.mean(axis=0)
        assert np.max(np.abs(means)) < 0.05
        var_normal = draws[:, :5].var(axis=0)
        assert np.all(np.abs(var_normal - 1.0) < 0.05)

    def test_documented_nonunit_variances(self):
        gen = Generator.mixed_experiment(15)
        v = gen.variances()
        assert np.allclose(v[:5], 1.0)
        assert np.allclose(v[5:10], 2.0)
        assert np.allclose(v[10:], 3.0)

    def test_product_density(self):
        gen = Generator(coordinates=[Normal(0, 1), Laplace(0, 1)])
        x = np.array([[0.3, -0.4]])
        expected = stats.norm.logpdf(0.3) + stats.laplace.logpdf(-0.4)
        assert gen.log_density(x)[0] == pytest.approx(expected, abs=1e-12)


class TestSerialization:
    @pytest.mark.parametrize("model", ALL_PARAMETRIC, ids=lambda m: m.family)
    def test_univariate_roundtrip(self, model):
        clone = model_from_dict(model.to_dict())
        u = np.linspace(0.05, 0.95, 19)
        assert np.allclose(clone.quantile(u), model.quantile(u), atol=0.0)

    def test_ls_roundtrip(self):
        gen = Generator.mixed_experiment(4)
        m = make_ls_model(gen, [1.0, 2.0, 3.0, 4.0], experiment_covariance(4, 0.1, 1.0, 2.0))
        clone = model_from_dict(m.to_dict())
        assert np.allclose(clone.scatter, m.scatter)
        assert np.allclose(clone.location, m.location)
        assert clone.generator.spec_key() == m.generator.spec_key()

    def test_grid_roundtrip_parallel_arrays(self):
        g = GridUnivariate(GridQuantile([0.2, 0.5, 0.8], [0.0, 1.0, 4.0]))
        payload = g.to_dict()
        assert payload["params"]["levels"] == [0.2, 0.5, 0.8]
        clone = model_from_dict(payload)
        assert np.allclose(clone.quantile(np.array([0.35])), g.quantile(np.array([0.35])))

    def test_discrete_measure_validation(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(np.zeros((2, 1)), np.array([0.6, 0.5]))
