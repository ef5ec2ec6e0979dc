import numpy as np
import pytest

from sensbounds.dataset import Dataset
from sensbounds.dv_family import BinaryStratum, DvParams, bounding_factor, dv_original_bounds
from sensbounds.dv_sample import (
    BootstrapConfig,
    BootstrapError,
    dv_bootstrap_ci,
    dv_conditional_variance,
    dv_population_bounds,
    dv_unconditional_bounds,
    fit_dv_models,
    fit_logistic_ml,
    replicate_counts,
)
from sensbounds.model_fit import build_design
from sensbounds.synthetic import SyntheticDgp, generate_synthetic


def single_stratum_data(n1=200, n0=200, p1=0.7, p0=0.5):
    y = np.concatenate([np.r_[np.ones(round(n1 * p1)), np.zeros(n1 - round(n1 * p1))],
                        np.r_[np.ones(round(n0 * p0)), np.zeros(n0 - round(n0 * p0))]])
    t = np.r_[np.ones(n1), np.zeros(n0)]
    return Dataset(y, t, np.zeros((n1 + n0, 0)))


class TestLogisticMl:
    def test_intercept_only(self):
        y = np.array([1, 1, 1, 0], float)
        coef, ok = fit_logistic_ml(np.ones((4, 1)), y)
        assert ok[0]
        assert coef[0, 0] == pytest.approx(np.log(3), abs=1e-10)

    def test_batched_weights_match_single_fits(self, rng):
        F = np.column_stack([np.ones(200), rng.normal(size=200)])
        y = (rng.random(200) < 0.4).astype(float)
        W = rng.uniform(0.5, 2.0, size=(3, 200))
        coef, ok = fit_logistic_ml(F, y, W)
        assert ok.all()
        for b in range(3):
            single, _ = fit_logistic_ml(F, y, W[b])
            np.testing.assert_allclose(coef[b], single[0], atol=1e-10)

    def test_separation_flagged(self):
        F = np.column_stack([np.ones(20), np.linspace(-1, 1, 20)])
        y = (F[:, 1] > 0).astype(float)
        _, ok = fit_logistic_ml(F, y)
        assert not ok[0]


class TestPointBounds:
    def test_single_stratum_example(self):
        models = fit_dv_models(single_stratum_data())
        np.testing.assert_allclose([models.p1[0], models.p0[0], models.pi[0]], [0.7, 0.5, 0.5], atol=1e-10)
        b = dv_unconditional_bounds(models, DvParams(4.0, 0.5, 2.0))
        assert b["ate"].upper == pytest.approx((0.7 - 0.5 / 1.6) * 1.3, abs=1e-10)
        assert b["ate"].upper == pytest.approx(0.50375, abs=1e-10)

    def test_matches_stratum_closed_form(self):
        models = fit_dv_models(single_stratum_data())
        p = DvParams(2.5, 0.5, 2.0)
        b = dv_unconditional_bounds(models, p)
        ref = dv_original_bounds(BinaryStratum(0.7, 0.5, 0.5), p)
        np.testing.assert_allclose(
            [b["mu1"].lower, b["mu1"].upper, b["mu0"].lower, b["mu0"].upper],
            [ref.mu1_lower, ref.mu1_upper, ref.mu0_lower, ref.mu0_upper],
            atol=1e-10,
        )
        assert b["crr"].upper == pytest.approx(ref.mu1_upper / ref.mu0_lower, rel=1e-10)
        assert b["crr"].lower == pytest.approx(ref.mu1_lower / ref.mu0_upper, rel=1e-10)

    def test_theta_one_collapses(self, rng):
        s = generate_synthetic(SyntheticDgp(n=600, outcome_kind="binary"), seed=5)
        models = fit_dv_models(s.data)
        b = dv_unconditional_bounds(models, DvParams(1.0, 0.5, 2.0))
        plug = float(np.mean(models.p1 - models.p0))
        assert b["ate"].lower == pytest.approx(plug, abs=1e-12)
        assert b["ate"].upper == pytest.approx(plug, abs=1e-12)

    def test_population_weights(self):
        p = DvParams(3.0, 0.5, 2.0)
        b = dv_population_bounds([0.7, 0.2], [0.5, 0.1], [0.5, 0.3], [0.25, 0.75], p)
        up = bounding_factor(2.0, 3.0)
        mu1_up = 0.25 * 0.7 * (0.5 + 0.5 * up) + 0.75 * 0.2 * (0.3 + 0.7 * up)
        assert b["mu1"].upper == pytest.approx(mu1_up)

    def test_requires_binary_outcome(self):
        with pytest.raises(ValueError):
            fit_dv_models(Dataset([0.5, 1.0], [1, 0], np.zeros((2, 0))))

    def test_conditional_variance_nonnegative(self):
        lo, up = dv_conditional_variance(0.7, 0.5, 0.5, 0.02, 0.03, 0.01, DvParams(2.0, 0.5, 2.0))
        assert lo >= 0 and up >= 0


@pytest.fixture(scope="module")
def sample():
    return generate_synthetic(SyntheticDgp(n=800, outcome_kind="binary"), seed=9)


class TestBootstrap:
    def test_counts_are_keyed_by_seed_and_replicate(self):
        a = replicate_counts(50, 4, 6)
        b = replicate_counts(50, 4, 3)
        np.testing.assert_array_equal(a[:3], b)
        assert np.all(a.sum(axis=1) == 50)

    def test_deterministic(self, sample):
        cfg = BootstrapConfig(replicates=100, seed=1)
        params = [DvParams(2.0, 0.5, 2.0)]
        a = dv_bootstrap_ci(sample.data, params, cfg)
        b = dv_bootstrap_ci(sample.data, params, cfg)
        assert a == b

    def test_point_inside_interval(self, sample):
        cfg = BootstrapConfig(replicates=200, seed=2, level=0.9)
        for iv in dv_bootstrap_ci(sample.data, [DvParams(1.5, 0.5, 2.0), DvParams(4.0, 1 / 1.5, 1.5)], cfg):
            assert iv.ci_lower <= iv.point_lower <= iv.point_upper <= iv.ci_upper
            assert iv.se_lower >= 0 and iv.se_upper >= 0
            assert iv.failures == 0

    def test_constant_outcome_arm_rejected(self):
        n = 40
        t = np.r_[np.ones(n // 2), np.zeros(n // 2)]
        data = Dataset(np.r_[np.ones(n // 2), np.zeros(n // 2)], t, np.zeros((n, 0)))
        with pytest.raises(RuntimeError):
            fit_dv_models(data)

    def test_frequent_resample_separation_raises(self):
        # One treated non-event: about a third of resamples drop it and separate.
        data = single_stratum_data(20, 20, 0.95, 0.5)
        with pytest.raises(BootstrapError):
            dv_bootstrap_ci(data, [DvParams(2.0, 0.5, 2.0)], BootstrapConfig(replicates=100))
        iv = dv_bootstrap_ci(data, [DvParams(2.0, 0.5, 2.0)], BootstrapConfig(replicates=100, max_failure_rate=0.9))
        assert 10 < iv[0].failures < 60
        assert iv[0].replicates + iv[0].failures == 100

    def test_zero_spread_when_resamples_match_the_sample(self):
        data = single_stratum_data(100, 100, 0.5, 0.5)
        design = build_design(data.x)
        cfg = BootstrapConfig(replicates=50, seed=0)
        iv = {i.estimand: i for i in dv_bootstrap_ci(data, [DvParams(1.0, 1.0, 1.0)], cfg, design=design)}
        assert iv["ate"].point_lower == pytest.approx(0.0, abs=1e-12)
        assert iv["ate"].point_upper == pytest.approx(0.0, abs=1e-12)
        assert iv["ate"].ci_lower <= 0.0 <= iv["ate"].ci_upper

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BootstrapConfig(replicates=1)
        with pytest.raises(ValueError):
            BootstrapConfig(level=1.0)
