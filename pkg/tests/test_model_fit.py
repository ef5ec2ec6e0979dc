import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from sensbounds.model_fit import (
    DesignSpec,
    FitError,
    LassoConfig,
    SeparationError,
    build_design,
    calibration_residual,
    fit_cal_logistic,
    fit_rcal_lasso,
    fit_smoothed_quantile,
    fit_weighted_logistic_mean,
    fit_weighted_ls,
    fit_weighted_quantile,
    fold_assignment,
    kkt_residual,
    logistic_mean_values,
    penalty_grid,
    propensity,
    soft_threshold,
    subgradient_residual,
)


def lp_quantile(H, y, w, tau):
    """Weighted quantile regression as a linear program (test oracle only)."""
    n, p = H.shape
    # Variables: beta (free), u+ >= 0, u- >= 0 with y - H beta = u+ - u-.
    c = np.concatenate([np.zeros(p), tau * w, (1 - tau) * w]) / n
    A_eq = np.hstack([H, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = optimize.linprog(c, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs")
    assert res.status == 0
    return res.x[:p], res.fun


def logistic_data(rng, n=400, p=3):
    x = rng.normal(size=(n, p))
    t = (rng.random(n) < 1 / (1 + np.exp(-(0.3 + x @ np.linspace(0.5, -0.5, p))))).astype(float)
    return x, t


class TestDesign:
    def test_main_effects_shape_and_scaling(self, rng):
        x = rng.normal(3.0, 2.0, size=(50, 2))
        d = build_design(x)
        assert d.shape == (50, 3)
        np.testing.assert_allclose(d.matrix[:, 0], 1.0)
        np.testing.assert_allclose(d.matrix[:, 1:].mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(d.matrix[:, 1:].var(axis=0), 1.0, atol=1e-10)

    def test_interactions_with_sparsity_filter(self):
        x = np.zeros((20, 3))
        x[:, 0] = np.arange(20) % 2
        x[:, 1] = np.arange(20) % 3 == 0
        x[:, 2] = np.arange(20)
        d = build_design(x, DesignSpec(interactions=True, min_count=5), ["a", "b", "c"])
        assert "a:b" in d.dropped
        assert d.names == ["(intercept)", "a", "b", "c", "a:c", "b:c"]

    def test_constant_column_dropped_with_warning(self):
        x = np.column_stack([np.ones(10), np.arange(10)])
        d = build_design(x, names=["const", "z"])
        assert d.names == ["(intercept)", "z"]
        assert d.warnings and "const" in d.warnings[0]

    def test_zero_rows(self):
        with pytest.raises(ValueError):
            build_design(np.empty((0, 2)))

    def test_transform_and_unstandardize(self, rng):
        x = rng.normal(size=(30, 2))
        d = build_design(x, DesignSpec(interactions=True))
        np.testing.assert_allclose(d.transform(x), d.matrix)
        coef = rng.normal(size=d.shape[1])
        raw = d.unstandardize(coef)
        raw_cols = np.column_stack([np.ones(30), x, x[:, 0] * x[:, 1]])
        np.testing.assert_allclose(raw_cols @ raw, d.matrix @ coef, atol=1e-12)


class TestCalLogistic:
    def test_intercept_only_three_to_one(self):
        fit = fit_cal_logistic(np.ones((4, 1)), np.array([1.0, 1.0, 1.0, 0.0]))
        assert fit.coef[0] == pytest.approx(math.log(3), abs=1e-12)
        np.testing.assert_allclose(propensity(np.ones((4, 1)), fit.coef), 0.75)

    def test_balanced_arms(self):
        fit = fit_cal_logistic(np.ones((6, 1)), np.array([1, 0] * 3, float))
        assert fit.coef[0] == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("arm", [1, 0])
    def test_calibration_identity(self, rng, arm):
        x, t = logistic_data(rng)
        d = build_design(x)
        fit = fit_cal_logistic(d, t, arm)
        assert fit.converged
        assert np.max(np.abs(calibration_residual(d, t, fit.coef, arm))) <= 1e-8
        # The objective at the optimum is no worse than at the zero vector.
        from sensbounds.model_fit import _CalLogistic

        prob = _CalLogistic(d.matrix, t, arm)
        assert prob.loss(fit.coef) <= prob.loss(np.zeros(d.shape[1]))

    def test_separation_names_columns(self):
        x = np.linspace(-1, 1, 40)[:, None]
        t = (x[:, 0] > 0).astype(float)
        with pytest.raises(SeparationError, match="x1"):
            fit_cal_logistic(build_design(x), t)


class TestWeightedQuantile:
    def test_intercept_only_median(self):
        y = np.array([3.0, 1.0, 7.0, 5.0, 9.0])
        fit = fit_weighted_quantile(np.ones((5, 1)), y, np.ones(5), 0.5)
        assert fit.coef[0] == pytest.approx(5.0, abs=1e-9)

    def test_binary_weighted_quantile(self):
        y = np.array([1.0] * 7 + [0.0] * 3)
        fit = fit_weighted_quantile(np.ones((10, 1)), y, np.ones(10), 2 / 3)
        assert fit.coef[0] == pytest.approx(1.0, abs=1e-9)

    def test_matches_linear_program(self, rng):
        n = 120
        x = rng.normal(size=(n, 2))
        H = np.column_stack([np.ones(n), x])
        y = H @ [1.0, 0.5, -1.0] + rng.standard_t(3, size=n)
        w = rng.uniform(0.2, 3.0, size=n)
        for tau in (0.25, 2 / 3):
            fit = fit_weighted_quantile(H, y, w, tau)
            _, lp_obj = lp_quantile(H, y, w, tau)
            assert fit.objective == pytest.approx(lp_obj, rel=1e-9, abs=1e-12)
            assert fit.converged
            assert subgradient_residual(H, y, w, tau, fit.coef) <= 1e-8 * w.mean()

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.1, 50.0), st.integers(0, 10_000))
    def test_weight_scaling_invariance(self, c, seed):
        gen = np.random.default_rng(seed)
        n = 40
        H = np.column_stack([np.ones(n), gen.normal(size=n)])
        y = H @ [0.3, 1.2] + gen.normal(size=n)
        w = gen.uniform(0.5, 2.0, size=n)
        a = fit_weighted_quantile(H, y, w, 0.7)
        b = fit_weighted_quantile(H, y, c * w, 0.7)
        assert b.objective == pytest.approx(c * a.objective, rel=1e-9)

    def test_discrete_optimality_per_unit(self, rng):
        n = 60
        y = rng.integers(0, 4, size=n).astype(float)
        w = rng.uniform(0.5, 2.0, size=n)
        fit = fit_weighted_quantile(np.ones((n, 1)), y, w, 0.6)
        b = fit.coef[0]
        assert w[y < b - 1e-9].sum() <= 0.6 * w.sum() + 1e-9
        assert 0.6 * w.sum() <= w[y <= b + 1e-9].sum() + 1e-9

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            fit_weighted_quantile(np.ones((3, 1)), np.zeros(3), np.zeros(3), 0.5)


class TestWeightedMeans:
    def test_intercept_only_weighted_mean(self):
        z = np.array([1.0, 2.0, 4.0])
        w = np.array([1.0, 1.0, 2.0])
        fit = fit_weighted_ls(np.ones((3, 1)), z, w)
        assert fit.coef[0] == pytest.approx(11 / 4)

    def test_exact_fit(self, rng):
        F = np.column_stack([np.ones(10), rng.normal(size=(10, 2))])
        z = F @ [1.0, -2.0, 0.5]
        fit = fit_weighted_ls(F, z, rng.uniform(0.1, 1.0, 10))
        np.testing.assert_allclose(F @ fit.coef, z, atol=1e-12)

    def test_matches_normal_equations(self, rng):
        F = np.column_stack([np.ones(50), rng.normal(size=(50, 4))])
        z = rng.normal(size=50)
        w = rng.uniform(0.1, 2.0, size=50)
        dense = np.linalg.solve(F.T @ (w[:, None] * F), F.T @ (w * z))
        np.testing.assert_allclose(fit_weighted_ls(F, z, w).coef, dense, atol=1e-10)

    def test_singular_gram_lists_columns(self, rng):
        x = rng.normal(size=(20, 1))
        F = np.column_stack([np.ones(20), x, 2 * x])
        with pytest.raises(FitError, match="dependent columns"):
            fit_weighted_ls(F, rng.normal(size=20), np.ones(20))

    def test_logistic_mean_stationarity(self, rng):
        n = 300
        F = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
        z = np.where(rng.random(n) < 0.6, 1.3, 0.0) + 0.1 * rng.random(n)
        w = rng.uniform(0.2, 2.0, size=n)
        fit = fit_weighted_logistic_mean(F, z, w)
        m = logistic_mean_values(F, fit.coef, fit.link_range)
        np.testing.assert_allclose(F.T @ (w * (z - m)) / n, 0.0, atol=1e-8)
        assert fit.link_range[0] <= m.min() and m.max() <= fit.link_range[1]

    def test_logistic_mean_constant_response(self):
        fit = fit_weighted_logistic_mean(np.ones((4, 1)), np.full(4, 0.3), np.ones(4))
        np.testing.assert_allclose(logistic_mean_values(np.ones((4, 1)), fit.coef, fit.link_range), 0.3)


class TestLassoPieces:
    def test_soft_threshold_scalar(self):
        # argmin 0.5 (x - 3)^2 + |x| is the soft-thresholded 3.
        assert soft_threshold(3.0, 1.0) == 2.0
        assert soft_threshold(-0.5, 1.0) == 0.0

    def test_penalty_grid(self):
        g = penalty_grid(2.0, 25)
        assert g.size == 25 and g[0] == 2.0
        assert np.all(np.diff(g) < 0)
        assert g[4] == pytest.approx(1.0)

    def test_fold_assignment_is_pure(self):
        a, b = fold_assignment(103, 5, 7), fold_assignment(103, 5, 7)
        np.testing.assert_array_equal(a, b)
        assert set(np.bincount(a)) <= {20, 21}
        assert not np.array_equal(a, fold_assignment(103, 5, 8))

    def test_kkt_residual(self):
        assert kkt_residual(np.array([0.0, 0.5, -1.0]), np.array([1.0, 0.0, 2.0]), 1.0) == 0.0
        assert kkt_residual(np.array([0.0, 1.5, 0.0]), np.zeros(3), 1.0) == pytest.approx(0.5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LassoConfig(folds=1)


class TestRcal:
    def _problems(self, rng):
        x, t = logistic_data(rng, n=300)
        d = build_design(x)
        y = x @ [1.0, 0.0, -0.5] + rng.normal(size=300)
        w = np.where(t == 1, rng.uniform(0.5, 2.0, 300), 0.0)
        return d, {
            "cal_logistic": {"treatment": t, "target_arm": 1},
            "weighted_quantile": {"y": y, "weights": w, "tau": 0.6},
            "weighted_ls": {"response": y, "weights": w},
            "weighted_logistic": {"response": np.clip(y, -1, 2), "weights": w},
        }

    def test_kkt_along_path_and_zero_at_kappa_star(self, rng):
        d, problems = self._problems(rng)
        for kind, data in problems.items():
            path = fit_rcal_lasso(kind, d, data, LassoConfig(n_penalties=10), cross_validate=False)
            assert np.all(path.kkt <= 1e-6), kind
            np.testing.assert_array_equal(path.coefs[0][1:], 0.0)
            above = fit_rcal_lasso(kind, d, data, penalties=[2 * path.kappa_star], cross_validate=False)
            np.testing.assert_array_equal(above.coef[1:], 0.0)

    def test_unpenalized_limit_matches_cal(self, rng):
        d, problems = self._problems(rng)
        cfg = LassoConfig(tol=1e-9)
        zero = [0.0]
        cal = fit_cal_logistic(d, problems["cal_logistic"]["treatment"]).coef
        rcal = fit_rcal_lasso("cal_logistic", d, problems["cal_logistic"], cfg, penalties=zero, cross_validate=False)
        np.testing.assert_allclose(rcal.coef, cal, atol=1e-6)
        ls = problems["weighted_ls"]
        rcal = fit_rcal_lasso("weighted_ls", d, ls, cfg, penalties=zero, cross_validate=False)
        np.testing.assert_allclose(rcal.coef, fit_weighted_ls(d, ls["response"], ls["weights"]).coef, atol=1e-6)
        wq = problems["weighted_quantile"]
        rcal = fit_rcal_lasso("weighted_quantile", d, wq, cfg, penalties=zero, cross_validate=False)
        eps = cfg.smoothing * float(np.std(wq["y"][wq["weights"] > 0]))
        smooth = fit_smoothed_quantile(d, wq["y"], wq["weights"], wq["tau"], eps)
        np.testing.assert_allclose(rcal.coef, smooth.coef, atol=1e-6)

    def test_cross_validation_is_deterministic(self, rng):
        d, problems = self._problems(rng)
        cfg = LassoConfig(n_penalties=8, seed=3)
        a = fit_rcal_lasso("weighted_ls", d, problems["weighted_ls"], cfg)
        b = fit_rcal_lasso("weighted_ls", d, problems["weighted_ls"], cfg)
        np.testing.assert_array_equal(a.cv_loss, b.cv_loss)
        assert a.selected == b.selected

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError):
            fit_rcal_lasso("poisson", np.ones((3, 1)), {})
