import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sensbounds.bounds_core import (
    DiscreteDistribution,
    DiscreteStratum,
    Recommended,
    SensitivityParams,
    population_bounds,
)
from sensbounds.dataset import Dataset
from sensbounds.dr_estimate import (
    EstimateReport,
    Estimator,
    arm_constants,
    crr_report,
    expected_phi,
    normal_quantile,
    phi_eval,
    regression_of_transformed,
    relaxed_population_bound,
    report_from_phi,
    run_grid,
    transformed_response,
)
from sensbounds.synthetic import SyntheticDgp, generate_synthetic

from conftest import discrete_distributions


def report(mu_lo, mu_up, var_lo, var_up, n, level=0.9):
    return EstimateReport("mu1", 2.0, 0.5, "CAL", n, level, mu_lo, mu_up, var_lo, var_up)


class TestPhi:
    KW = dict(loss_weight=1.5, tau_level=2 / 3)

    def test_treated_unit_example(self):
        v = phi_eval("upper", 1, [1.0], [1.0], [0.5], 0.0, [1.0], **self.KW)
        np.testing.assert_allclose(v, [2.0], atol=1e-15)

    def test_control_unit_gives_regression(self):
        v = phi_eval("upper", 1, [3.7, -1.0], [0.0, 0.0], [0.3, 0.6], 0.0, [0.4, 0.9], **self.KW)
        np.testing.assert_allclose(v, [0.4, 0.9])

    def test_zero_delta_is_standard_aipw(self, rng):
        n = 50
        y, t, pi, m = rng.normal(size=n), rng.integers(0, 2, n), rng.uniform(0.1, 0.9, n), rng.normal(size=n)
        for side in ("upper", "lower"):
            v = phi_eval(side, 1, y, t, pi, rng.normal(size=n), m, loss_weight=0.0, tau_level=0.7)
            np.testing.assert_allclose(v, t * y / pi - (t / pi - 1) * m, atol=1e-12)
            v0 = phi_eval(side, 0, y, t, pi, rng.normal(size=n), m, loss_weight=0.0, tau_level=0.7)
            np.testing.assert_allclose(v0, (1 - t) * y / (1 - pi) - ((1 - t) / (1 - pi) - 1) * m, atol=1e-12)

    def test_propensity_outside_unit_interval(self):
        with pytest.raises(ValueError):
            phi_eval("upper", 1, [1.0], [1.0], [1.0], 0.0, [0.0], **self.KW)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 3), st.floats(0.01, 0.99))
    def test_transformed_response_brackets_outcome(self, y, q, w, t):
        up = transformed_response([y], q, w, t, "upper")[0]
        lo = transformed_response([y], q, w, t, "lower")[0]
        assert lo <= y <= up

    def test_arm_constants(self):
        w, t = arm_constants(0.5, 2.0, 0.5, 1)
        assert (w, t) == pytest.approx((0.75, 2 / 3))
        w0, t0 = arm_constants(0.5, 2.0, 0.5, 0)
        assert (w0, t0) == pytest.approx((0.75, 2 / 3))
        with pytest.raises(ValueError):
            arm_constants(0.0, 2.0, 0.5, 0)


class TestReports:
    def test_one_sided_example(self):
        r = report(0.6, 0.775, 0.04, 0.04, 400)
        assert r.ci_one_sided[1] == pytest.approx(0.775 + 1.2815516 * 0.01, abs=1e-8)
        assert r.ci_one_sided[1] == pytest.approx(0.78782, abs=5e-6)

    def test_two_sided_example(self):
        r = report(0.6, 0.775, 0.09, 0.04, 100)
        lo, up = r.ci_two_sided
        assert lo == pytest.approx(0.6 - 1.6448536 * 0.03, abs=1e-8)
        assert up == pytest.approx(0.775 + 1.6448536 * 0.02, abs=1e-8)

    def test_normal_quantile(self):
        assert normal_quantile(0.1) == pytest.approx(1.2815515655, abs=1e-9)
        assert normal_quantile(0.05) == pytest.approx(1.6448536270, abs=1e-9)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=30), st.floats(0.5, 0.99))
    def test_variance_identity_and_nesting(self, vals, level):
        phi = np.asarray(vals)
        r = report_from_phi("mu1", 1.5, 0.5, "CAL", level, phi - 1.0, phi)
        assert r.mu_hat_upper == pytest.approx(float(np.mean(phi)))
        assert r.var_upper == pytest.approx(float(np.mean((phi - np.mean(phi)) ** 2)))
        assert r.var_upper >= 0
        lo, up = r.ci_two_sided
        assert lo <= r.mu_hat_lower and up >= r.mu_hat_upper

    def test_zero_variance_gives_point_interval(self):
        r = report_from_phi("mu1", 1.5, 0.5, "CAL", 0.9, np.full(5, 0.2), np.full(5, 0.3))
        assert r.ci_two_sided == (0.2, 0.3)

    def test_crr_delta_method(self):
        num = np.array([0.5, 0.7, 0.9])
        den = np.array([0.4, 0.5, 0.3])
        mu1 = report_from_phi("mu1", 1.0, 1.0, "CAL", 0.9, num, num)
        mu0 = report_from_phi("mu0", 1.0, 1.0, "CAL", 0.9, den, den)
        r = crr_report(mu1, mu0)
        assert r.mu_hat_upper == pytest.approx(0.7 / 0.4)
        infl = ((num - 0.7) - 1.75 * (den - 0.4)) / 0.4
        assert r.var_upper == pytest.approx(float(np.mean(infl**2)))

    def test_crr_nonpositive_denominator(self):
        mu1 = report_from_phi("mu1", 1.0, 1.0, "CAL", 0.9, np.ones(3), np.ones(3))
        mu0 = report_from_phi("mu0", 1.0, 1.0, "CAL", 0.9, np.zeros(3), np.zeros(3))
        assert crr_report(mu1, mu0).mu_hat_upper == math.inf


def strata_instance(rng, k=4):
    strata = []
    for _ in range(k):
        support = np.sort(rng.choice(np.arange(-3, 6), size=4, replace=False)).astype(float)
        probs = rng.dirichlet(np.ones(4))
        control = DiscreteDistribution(support - 1.0, rng.dirichlet(np.ones(4)))
        strata.append(DiscreteStratum(1.0 / k, float(rng.uniform(0.2, 0.8)), DiscreteDistribution(support, probs), control))
    return strata


class TestPopulationIdentity:
    """Exact expectations of the estimating function on finite-support laws."""

    def test_double_robustness(self, rng):
        for _ in range(50):
            strata = strata_instance(rng)
            lam, delta = float(rng.uniform(1.1, 3.0)), float(rng.uniform(0, 1))
            l1, l2 = 1 / lam, lam
            q = rng.normal(size=len(strata))
            truth_pi = [s.propensity for s in strata]
            truth_m = regression_of_transformed(strata, q, l1, l2, delta)
            target = relaxed_population_bound(strata, q, l1, l2, delta)
            wrong_pi = rng.uniform(0.1, 0.9, size=len(strata))
            wrong_m = truth_m + rng.normal(size=len(strata))
            assert expected_phi(strata, truth_pi, q, wrong_m, l1, l2, delta) == pytest.approx(target, abs=1e-10)
            assert expected_phi(strata, wrong_pi, q, truth_m, l1, l2, delta) == pytest.approx(target, abs=1e-10)

    def test_sharp_at_true_quantile(self, rng):
        for _ in range(50):
            strata = strata_instance(rng)
            lam, delta = float(rng.uniform(1.1, 3.0)), float(rng.uniform(0, 1))
            params = SensitivityParams.symmetric(lam, Recommended(delta))
            pb = population_bounds(params, strata)
            for side, level, target in (
                ("upper", params.tau, pb.mu1_upper),
                ("lower", 1 - params.tau, pb.mu1_lower),
            ):
                q = [s.treated.quantile(level) for s in strata]
                m = regression_of_transformed(strata, q, params.lambda1, params.lambda2, delta, side)
                got = expected_phi(strata, [s.propensity for s in strata], q, m,
                                   params.lambda1, params.lambda2, delta, side)
                assert got == pytest.approx(target, abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(discrete_distributions(), st.floats(-6, 6), st.floats(1.0, 4.0), st.floats(0, 1))
    def test_relaxed_bound_dominates_sharp(self, dist, q, lam, delta):
        stratum = DiscreteStratum(1.0, 0.5, dist, dist)
        params = SensitivityParams.symmetric(lam, Recommended(delta))
        sharp = population_bounds(params, [stratum]).mu1_upper
        relaxed = relaxed_population_bound([stratum], [q], params.lambda1, params.lambda2, delta)
        assert relaxed >= sharp - 1e-10


@pytest.fixture(scope="module")
def synthetic_sample():
    return generate_synthetic(SyntheticDgp(n=1500), seed=11)


class TestEstimator:
    def test_lambda_one_cells_equal_across_delta(self, synthetic_sample):
        reports = run_grid(synthetic_sample.data, [1.0], [0.2, 0.5, 1.0])
        by_est = {}
        for r in reports:
            by_est.setdefault(r.estimand, []).append((r.mu_hat_lower, r.mu_hat_upper, r.var_lower, r.var_upper))
        for vals in by_est.values():
            for v in vals[1:]:
                np.testing.assert_allclose(v, vals[0], rtol=1e-12, atol=1e-14)

    def test_delta_one_is_msm_and_bounds_widen(self, synthetic_sample):
        est = Estimator(synthetic_sample.data)
        reports = {(r.estimand, r.delta): r for d in (0.2, 0.5, 1.0) for r in est.estimate_bounds(2.0, d)}
        assert reports[("mu1", 1.0)].model == "MSM"
        assert reports[("mu1", 0.5)].model == "eMSM"
        for e in ("mu1", "mu0", "ate"):
            widths = [reports[(e, d)].mu_hat_upper - reports[(e, d)].mu_hat_lower for d in (0.2, 0.5, 1.0)]
            assert widths[0] <= widths[1] + 1e-12 <= widths[2] + 2e-12

    def test_pointwise_ordering(self, synthetic_sample):
        est = Estimator(synthetic_sample.data)
        for arm in (1, 0):
            up = est.phi(arm, "upper", 0.5, 2.0, 0.5)
            lo = est.phi(arm, "lower", 0.5, 2.0, 0.5)
            assert np.mean(up) >= np.mean(lo)

    def test_grid_sorted_and_complete(self, synthetic_sample):
        reports = run_grid(synthetic_sample.data, [1.5, 1.0], [0.5, 0.2])
        keys = [(r.estimand, r.lam, r.delta) for r in reports]
        assert keys == sorted(keys)
        assert len(reports) == 3 * 4

    def test_binary_outcome_adds_crr(self):
        s = generate_synthetic(SyntheticDgp(n=800, outcome_kind="binary"), seed=2)
        for mean_model, label in (("linear", "CAL"), ("logistic", "CAL-logit")):
            reports = Estimator(s.data, mean_model=mean_model).estimate_bounds(1.5, 0.5)
            assert [r.estimand for r in reports] == ["mu1", "mu0", "ate", "crr"]
            assert {r.method for r in reports} == {label}

    def test_degenerate_arm_rejected(self):
        data = Dataset(np.arange(5.0), np.ones(5), np.arange(5.0))
        with pytest.raises(ValueError):
            Estimator(data)

    def test_bad_options(self, synthetic_sample):
        with pytest.raises(ValueError):
            Estimator(synthetic_sample.data, method="OLS")
        with pytest.raises(ValueError):
            Estimator(synthetic_sample.data, mean_model="probit")
        with pytest.raises(ValueError):
            Estimator(synthetic_sample.data).estimate_bounds(0.5, 0.5)
