"""Descent-step and barycenter tests against closed-form fixed points."""

import math

import numpy as np
import pytest

from otbayes import (
    CopulaModel,
    Generator,
    GridQuantile,
    GridUnivariate,
    IndependenceCopula,
    Laplace,
    ModelDistribution,
    Normal,
    RadialProfile,
    ScheduleError,
    SphericalModel,
    StepSchedule,
    StopRule,
    batch_sgd_step,
    empirical_barycenter,
    fixed_point_residual,
    gk_step,
    make_ls_model,
    population_barycenter,
    sgd_step,
    variance_of_gradient_estimator,
    w2,
    w2_ls,
    wp_univariate,
)

TIGHT = StopRule(rel_tol=1e-10, max_iter=300)


class TestStepSchedule:
    def test_harmonic_accepted(self):
        s = StepSchedule.harmonic().validate()
        assert s.gamma(1) == 1.0
        assert s.gamma(4) == 0.25

    def test_inverse_sqrt_rejected(self):
        with pytest.raises(ScheduleError):
            StepSchedule(a=1.0, c=0.0, r=0.5).validate()

    def test_r_above_one_rejected(self):
        with pytest.raises(ScheduleError):
            StepSchedule(a=1.0, c=0.0, r=1.2).validate()

    def test_rule_flags_follow_exponent(self):
        s = StepSchedule(a=2.0, c=3.0, r=0.75)
        assert s.sum_diverges and s.sq_sum_converges
        assert s.gamma(1) == pytest.approx(2.0 / 4.0**0.75)

    def test_explicit_sequence(self):
        s = StepSchedule(explicit=(0.5, 0.25, 0.125))
        s.validate()
        assert s.gamma(2) == 0.25
        assert s.gamma(99) == 0.125  # clamps to the last step
        with pytest.raises(ScheduleError):
            StepSchedule(explicit=(0.5, 0.0)).validate()

    def test_explicit_flags_validated(self):
        bad = StepSchedule(explicit=(0.5, 0.5), sq_sum_converges=False)
        with pytest.raises(ScheduleError):
            bad.validate()


class TestGkStep:
    def test_gamma_zero_is_identity(self):
        mu = Normal(0, 1)
        dist = ModelDistribution(support=[Normal(5, 2)])
        assert gk_step(mu, dist, 0.0) is mu

    def test_point_mass_full_step_returns_target(self):
        mu = Normal(0, 1)
        target = Normal(3, 2)
        out = gk_step(mu, ModelDistribution(support=[target]), 1.0)
        assert isinstance(out, Normal)
        assert out.loc == pytest.approx(3.0) and out.scale == pytest.approx(2.0)

    def test_two_gaussian_fixed_point(self):
        # the equal-weight barycenter of two normals averages mean and sd
        dist = ModelDistribution(support=[Normal(0.0, 1.0), Normal(4.0, 3.0)])
        mu = Normal(-1.0, 0.5)
        for _ in range(5):
            mu = gk_step(mu, dist, 1.0)
        assert mu.loc == pytest.approx(2.0, abs=1e-12)
        assert mu.scale == pytest.approx(2.0, abs=1e-12)

    def test_weighted_quantile_average(self):
        dist = ModelDistribution(support=[Normal(1, 1), Normal(3, 1)],
                                 weights=[0.3, 0.7])
        out = gk_step(Normal(0, 1), dist, 1.0)
        assert out.loc == pytest.approx(2.4, abs=1e-12)
        assert out.scale == pytest.approx(1.0, abs=1e-12)

    def test_gamma_out_of_range(self):
        with pytest.raises(ValueError):
            gk_step(Normal(0, 1), ModelDistribution(support=[Normal(1, 1)]), 1.5)

    def test_partial_step_interpolates_quantiles(self):
        mu, m = Normal(0, 1), Normal(2, 1)
        out = gk_step(mu, ModelDistribution(support=[m]), 0.25)
        assert out.loc == pytest.approx(0.5, abs=1e-12)


class TestSgdSteps:
    def test_full_step_jumps_to_sample(self):
        out = sgd_step(Normal(0, 1), Laplace(2, 3), 1.0)
        assert isinstance(out, Laplace)
        assert out.loc == pytest.approx(2.0) and out.scale == pytest.approx(3.0)

    def test_zero_step_is_identity(self):
        mu = Normal(0, 1)
        assert sgd_step(mu, Normal(9, 9), 0.0) is mu

    def test_ls_scalar_update(self):
        # one dim: A0^2 = 1, Am^2 = 9, gamma = 1/2 -> A1^2 = ((1+3)/2)^2 = 4
        gen = Generator.standard_normal(1)
        mu = make_ls_model(gen, [0.0], [[1.0]])
        m = make_ls_model(gen, [0.0], [[9.0]])
        out = sgd_step(mu, m, 0.5)
        assert out.scatter_sq[0, 0] == pytest.approx(4.0, abs=1e-12)

    def test_batch_size_one_equals_sgd(self):
        mu, m = Normal(0, 1), Normal(2, 2)
        a = sgd_step(mu, m, 0.3)
        b = batch_sgd_step(mu, [m], 0.3)
        assert a.loc == pytest.approx(b.loc) and a.scale == pytest.approx(b.scale)

    def test_degenerate_batch_equals_sgd(self):
        mu, m = Normal(0, 1), Normal(2, 2)
        a = sgd_step(mu, m, 0.6)
        b = batch_sgd_step(mu, [m, m, m], 0.6)
        assert a.loc == pytest.approx(b.loc) and a.scale == pytest.approx(b.scale)

    def test_batch_quantile_average(self):
        out = batch_sgd_step(Laplace(7, 9), [Normal(0, 1), Normal(2, 1)], 1.0)
        assert isinstance(out, Normal)
        assert out.loc == pytest.approx(1.0) and out.scale == pytest.approx(1.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            batch_sgd_step(Normal(0, 1), [], 0.5)


class TestEmpiricalBarycenter:
    def test_two_gaussian_closed_form(self):
        dist = ModelDistribution(support=[Normal(0, 1), Normal(2, 3)])
        bary, trace = empirical_barycenter(dist, stop=TIGHT)
        assert trace.converged
        assert w2(bary, Normal(1.0, 2.0)) < 1e-6

    def test_weighted_univariate(self):
        dist = ModelDistribution(support=[Normal(1, 1), Normal(3, 1)], weights=[0.3, 0.7])
        bary, _ = empirical_barycenter(dist, stop=TIGHT)
        assert w2(bary, Normal(2.4, 1.0)) < 1e-8

    def test_ls_diagonal_sigma_averaging(self):
        gen = Generator.standard_normal(2)
        dist = ModelDistribution(support=[
            make_ls_model(gen, [0.0, 0.0], np.diag([1.0, 4.0])),
            make_ls_model(gen, [0.0, 0.0], np.diag([4.0, 1.0])),
        ])
        bary, trace = empirical_barycenter(dist, stop=TIGHT)
        assert trace.converged
        assert np.allclose(bary.scatter_sq, np.diag([2.25, 2.25]), atol=1e-10)
        assert fixed_point_residual(bary, dist) < 1e-8

    def test_nonconvergence_flagged(self):
        gen = Generator.standard_normal(3)
        rng = np.random.default_rng(1)
        support = []
        for _ in range(4):
            f = rng.normal(size=(3, 3))
            support.append(make_ls_model(gen, rng.normal(size=3), f @ f.T + 0.1 * np.eye(3)))
        dist = ModelDistribution(support=support)
        with pytest.warns(RuntimeWarning):
            _, trace = empirical_barycenter(dist, stop=StopRule(rel_tol=1e-16, max_iter=2))
        assert not trace.converged

    def test_copula_barycenter_is_marginal_barycenter(self):
        cop = IndependenceCopula()
        dist = ModelDistribution(support=[
            CopulaModel(cop, [Normal(0, 1), Normal(0, 2)]),
            CopulaModel(cop, [Normal(2, 1), Normal(4, 4)]),
        ])
        bary, _ = empirical_barycenter(dist, stop=TIGHT)
        assert bary.marginals[0].loc == pytest.approx(1.0)
        assert bary.marginals[1].scale == pytest.approx(3.0)

    def test_spherical_barycenter_averages_profiles(self):
        gen = Generator.standard_normal(2)
        r = np.linspace(0.0, 6.0, 200)
        dist = ModelDistribution(support=[
            SphericalModel(gen, RadialProfile(r, 1.0 * r)),
            SphericalModel(gen, RadialProfile(r, 3.0 * r)),
        ])
        bary, _ = empirical_barycenter(dist, stop=TIGHT)
        assert np.allclose(bary.alpha(r), 2.0 * r, atol=1e-10)


class TestFixedPointResidual:
    def test_zero_at_point_mass(self):
        m = Normal(0.4, 1.3)
        assert fixed_point_residual(m, ModelDistribution.point_mass(m)) < 1e-12

    def test_small_at_closed_form_barycenter(self):
        dist = ModelDistribution(support=[Normal(0, 1), Normal(2, 3)])
        assert fixed_point_residual(Normal(1, 2), dist) < 1e-8

    def test_large_for_wrong_scale(self):
        dist = ModelDistribution(support=[Normal(0, 1), Normal(2, 3)])
        assert fixed_point_residual(Normal(1, 4), dist) > 0.1

    def test_sampler_mode_uses_draws(self):
        rng = np.random.default_rng(3)
        dist = ModelDistribution.from_sampler(lambda r: Normal(r.normal(), 1.0))
        res = fixed_point_residual(Normal(0, 1), dist, n_mc=4000, rng=rng)
        assert res < 0.05  # mean displacement of N(theta,1) population at truth


class TestPopulationBarycenter:
    def test_point_population_converges(self):
        m = Normal(1.5, 0.7)
        dist = ModelDistribution.point_mass(m)
        rng = np.random.default_rng(0)
        out, trace = population_barycenter(dist, StepSchedule.harmonic(), 200, 1, Normal(0, 1), rng)
        assert w2(out, m) < 1e-3
        assert len(trace) == 200

    def test_gaussian_location_population(self):
        # theta ~ N(0,1), models N(theta,1): barycenter is N(0,1)
        rng = np.random.default_rng(123)
        dist = ModelDistribution.from_sampler(lambda r: Normal(r.normal(), 1.0))
        out, _ = population_barycenter(dist, StepSchedule.harmonic(), 2000, 8, Normal(5, 1), rng,
                                       trace_every=0)
        assert w2(out, Normal(0, 1)) < 0.05
        assert fixed_point_residual(out, dist, n_mc=2000, rng=rng) < 5e-3

    def test_invalid_schedule_rejected(self):
        dist = ModelDistribution.point_mass(Normal(0, 1))
        with pytest.raises(ScheduleError):
            population_barycenter(dist, StepSchedule(r=0.5), 10, 1, Normal(0, 1),
                                  np.random.default_rng(0))

    def test_empirical_and_population_agree_on_gaussian_case(self):
        rng = np.random.default_rng(2024)
        thetas = rng.normal(size=500)
        support = [Normal(t, 1.0) for t in thetas]
        emp, _ = empirical_barycenter(ModelDistribution(support=support), stop=TIGHT)

        rng2 = np.random.default_rng(77)
        dist = ModelDistribution.from_sampler(lambda r: Normal(r.normal(), 1.0))
        pop, _ = population_barycenter(dist, StepSchedule.harmonic(), 2000, 8,
                                       Normal(0, 1), rng2, trace_every=0)
        assert w2(emp, pop) < 0.05


class TestVarianceOfGradientEstimator:
    def test_zero_for_point_mass_at_itself(self):
        m = Normal(0, 1)
        rng = np.random.default_rng(1)
        v = variance_of_gradient_estimator(m, ModelDistribution.point_mass(m), 4, 200, rng)
        assert v == pytest.approx(0.0, abs=1e-12)

    def test_monotone_in_batch_size(self):
        rng = np.random.default_rng(5)
        dist = ModelDistribution.from_sampler(lambda r: Normal(r.normal(), 1.0))
        mu = Normal(0, 1)
        v1 = variance_of_gradient_estimator(mu, dist, 1, 400, rng)
        v64 = variance_of_gradient_estimator(mu, dist, 64, 400, rng)
        assert v64 < v1

    def test_one_over_s_law(self):
        rng = np.random.default_rng(11)
        dist = ModelDistribution.from_sampler(lambda r: Normal(r.normal(), 1.0))
        mu = Normal(0, 1)
        v1 = variance_of_gradient_estimator(mu, dist, 1, 500, rng)
        v8 = variance_of_gradient_estimator(mu, dist, 8, 500, rng)
        assert 8 * 0.7 < v1 / v8 < 8 * 1.3


class TestRiskDescentInExpectation:
    def test_expected_single_step_bound(self):
        # population theta ~ N(0,1), sigma = 1; mu = N(1/2, 1); gamma small.
        # bound: E[F(mu+) - F(mu)] <= gamma^2 F(mu) - gamma |F'|^2
        rng = np.random.default_rng(31)
        gamma, mu_loc = 0.1, 0.5
        f_mu = 0.5 * (mu_loc**2 + 1.0)
        grad_sq = mu_loc**2
        bound = gamma**2 * f_mu - gamma * grad_sq
        deltas = []
        for _ in range(600):
            theta = rng.normal()
            new_loc = mu_loc + gamma * (theta - mu_loc)
            f_new = 0.5 * ((new_loc - 0.0) ** 2 + 0.0 + 1.0)  # E(new_loc - theta')^2 over theta'
            f_new = 0.5 * (new_loc**2 + 1.0)
            deltas.append(f_new - f_mu)
        mean = np.mean(deltas)
        slack = 3.0 * np.std(deltas) / math.sqrt(len(deltas))
        assert mean <= bound + slack

    def test_sgd_step_realizes_the_predicted_risk(self):
        # the package step must match the hand-computed location update
        out = sgd_step(Normal(0.5, 1.0), Normal(2.0, 1.0), 0.1)
        assert out.loc == pytest.approx(0.5 + 0.1 * 1.5, abs=1e-12)
        assert out.scale == pytest.approx(1.0, abs=1e-12)


class TestShapePreservation:
    @staticmethod
    def _symmetric_support(rng, size):
        makers = [
            lambda loc, s: Normal(loc, s),
            lambda loc, s: Laplace(loc, s),
            lambda loc, s: __import__("otbayes").Logistic(loc, s),
        ]
        out = []
        for _ in range(size):
            mk = makers[rng.integers(len(makers))]
            out.append(mk(rng.normal(), 0.5 + rng.uniform()))
        return out

    def test_symmetry_preserved(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            support = self._symmetric_support(rng, int(rng.integers(2, 6)))
            dist = ModelDistribution(support=support)
            bary, _ = empirical_barycenter(dist, stop=TIGHT)
            y = np.linspace(0.01, 0.49, 80)
            top = bary.quantile(0.5 + y)
            bot = bary.quantile(0.5 - y)
            assert np.max(np.abs((top + bot) - (top + bot)[0])) < 1e-8

    def test_unimodality_preserved_for_log_concave(self):
        from otbayes import Exponential, Gumbel, Logistic

        rng = np.random.default_rng(23)
        makers = [
            lambda: Normal(rng.normal(), 0.5 + rng.uniform()),
            lambda: Laplace(rng.normal(), 0.5 + rng.uniform()),
            lambda: Logistic(rng.normal(), 0.5 + rng.uniform()),
            lambda: Gumbel(rng.normal(), 0.5 + rng.uniform()),
            lambda: Exponential(0.5 + rng.uniform()),
        ]
        for _ in range(20):
            support = [makers[rng.integers(len(makers))]() for _ in range(int(rng.integers(2, 5)))]
            bary, _ = empirical_barycenter(ModelDistribution(support=support), stop=TIGHT)
            u = np.linspace(0.005, 0.995, 397)
            g = bary.quantile_derivative(u)
            second = g[2:] - 2.0 * g[1:-1] + g[:-2]
            assert np.min(second) > -1e-8


class TestTraceExport:
    def test_csv_columns(self, tmp_path):
        dist = ModelDistribution(support=[Normal(0, 1), Normal(2, 3)])
        _, trace = empirical_barycenter(dist, stop=TIGHT)
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iter,gamma,F_est,gradnorm_est,wall_ms"
        assert len(lines) == len(trace) + 1

    def test_risk_history_nonincreasing_for_deterministic_descent(self):
        gen = Generator.standard_normal(3)
        rng = np.random.default_rng(6)
        support = []
        for _ in range(5):
            f = rng.normal(size=(3, 3))
            support.append(make_ls_model(gen, rng.normal(size=3), f @ f.T + 0.2 * np.eye(3)))
        _, trace = empirical_barycenter(ModelDistribution(support=support), stop=TIGHT)
        risks = np.array(trace.risk)
        assert np.all(np.diff(risks) <= 1e-10)


class TestMixedGridSupport:
    def test_grid_member_in_support(self):
        from otbayes import default_levels

        u = default_levels(256)
        grid_model = GridUnivariate(GridQuantile(u, Laplace(1.0, 1.0).quantile(u)))
        dist = ModelDistribution(support=[Normal(0, 1), grid_model])
        bary, _ = empirical_barycenter(dist, stop=TIGHT)
        # quantiles must be the exact average of the two components
        uu = np.linspace(0.05, 0.95, 9)
        expected = 0.5 * (Normal(0, 1).quantile(uu) + grid_model.quantile(uu))
        assert np.allclose(bary.quantile(uu), expected, atol=1e-12)
