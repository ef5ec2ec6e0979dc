import numpy as np
import pytest

from sensbounds.bounds_core import SensitivityParams, Recommended, psi_factors, summarize
from sensbounds.synthetic import SyntheticDgp, generate_synthetic, population_strata, truth_sidecar


class TestTruth:
    @pytest.mark.parametrize("kind", ["continuous", "binary"])
    def test_lambda_one_collapses(self, kind):
        truth = truth_sidecar(SyntheticDgp(lam=1.0, outcome_kind=kind))
        strata = population_strata(SyntheticDgp(outcome_kind=kind))
        mu1 = sum(s.weight * s.treated.mean for s in strata)
        mu0 = sum(s.weight * s.control.mean for s in strata)
        assert truth["mu1_lower"] == pytest.approx(mu1, abs=1e-12)
        assert truth["mu1_upper"] == pytest.approx(mu1, abs=1e-12)
        assert truth["mu0_lower"] == pytest.approx(mu0, abs=1e-12)
        assert truth["ate_upper"] == pytest.approx(mu1 - mu0, abs=1e-12)

    def test_sidecar_psi(self):
        dgp = SyntheticDgp(lam=2.0, delta=0.5)
        truth = truth_sidecar(dgp)
        params = SensitivityParams.symmetric(2.0, Recommended(0.5))
        for s, psi in zip(population_strata(dgp), truth["psi_treated"]):
            np.testing.assert_allclose(psi, psi_factors(params, summarize(s.treated, params.tau)))
        assert len(truth["psi_control"]) == 9
        assert truth["mu1_lower"] < truth["mu1_upper"]

    def test_bounds_shrink_with_delta(self):
        wide = truth_sidecar(SyntheticDgp(delta=1.0))
        narrow = truth_sidecar(SyntheticDgp(delta=0.3))
        assert wide["mu1_lower"] <= narrow["mu1_lower"] <= narrow["mu1_upper"] <= wide["mu1_upper"]

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticDgp(treated_coef=(1.0, 0.0))
        with pytest.raises(ValueError):
            SyntheticDgp(outcome_kind="count")
        with pytest.raises(ValueError):
            SyntheticDgp(lam=0.5)


class TestSample:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticDgp(n=300), seed=4)
        b = generate_synthetic(SyntheticDgp(n=300), seed=4)
        np.testing.assert_array_equal(a.data.y, b.data.y)
        np.testing.assert_array_equal(a.data.t, b.data.t)

    def test_full_data_keeps_observed_rows(self):
        a = generate_synthetic(SyntheticDgp(n=500), seed=7)
        b = generate_synthetic(SyntheticDgp(n=500), seed=7, full_data=True)
        np.testing.assert_array_equal(a.data.y, b.data.y)
        np.testing.assert_array_equal(a.data.x, b.data.x)
        treated = b.data.t == 1
        np.testing.assert_array_equal(b.y1_full[treated], b.data.y[treated])

    @pytest.mark.parametrize("kind", ["continuous", "binary"])
    def test_full_data_attains_upper_bound(self, kind):
        dgp = SyntheticDgp(n=200_000, outcome_kind=kind, delta=0.5)
        s = generate_synthetic(dgp, seed=3, full_data=True)
        se = np.std(s.y1_full) / np.sqrt(dgp.n)
        assert abs(np.mean(s.y1_full) - s.truth["mu1_upper"]) < 4 * se

    def test_confounder_is_binary(self):
        s = generate_synthetic(SyntheticDgp(n=400), seed=1, full_data=True)
        assert set(np.unique(s.confounder)) <= {0.0, 1.0}
