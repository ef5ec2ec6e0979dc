"""Synthetic data with known population bounds.

Covariates are discrete, so the observed-data law is a finite mixture of
strata and the population bounds follow exactly from the per-stratum outcome
laws.  Optionally the treated-arm counterfactuals of control units are drawn
from the binary-confounder worst case, so that the full data attain the upper
bound for ``mu1`` while satisfying the sensitivity constraints.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .bounds_core import (
    DiscreteDistribution,
    DiscreteStratum,
    Recommended,
    SensitivityParams,
    population_bounds,
    psi_factors,
    summarize,
    worst_case_construction,
)
from .dataset import Dataset

OUTCOME_KINDS = ("continuous", "binary")


@dataclass(frozen=True)
class SyntheticDgp:
    """Discrete-covariate data-generating process.

    Linear predictors take the form ``c0 + c1 x1 + ... + ck xk + c_int x1 x2``,
    so each coefficient tuple has ``len(levels) + 2`` entries.  Continuous
    outcomes are ``predictor + noise`` with a discrete noise law shared by the
    strata; binary outcomes are Bernoulli with ``expit(predictor)``.
    """

    n: int = 2000
    levels: tuple[int, ...] = (3, 3)
    propensity_coef: tuple[float, ...] = (0.0, 0.5, -0.4, 0.0)
    treated_coef: tuple[float, ...] = (1.0, 0.8, -0.5, 0.0)
    control_coef: tuple[float, ...] = (0.0, 0.5, -0.3, 0.0)
    noise_support: tuple[float, ...] = (-1.5, -0.5, 0.0, 0.5, 1.0, 2.5)
    noise_probs: tuple[float, ...] = (0.1, 0.2, 0.25, 0.2, 0.15, 0.1)
    outcome_kind: str = "continuous"
    lam: float = 2.0
    delta: float = 1.0

    def __post_init__(self) -> None:
        k = len(self.levels)
        for name in ("propensity_coef", "treated_coef", "control_coef"):
            if len(getattr(self, name)) != k + 2:
                raise ValueError(f"{name} needs {k + 2} entries for {k} covariates")
        if k < 2 and any(c[-1] != 0 for c in (self.propensity_coef, self.treated_coef, self.control_coef)):
            raise ValueError("the interaction term needs at least two covariates")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ValueError(f"outcome_kind must be one of {OUTCOME_KINDS}")
        if self.n < 1 or min(self.levels) < 1:
            raise ValueError("n and every level count must be positive")
        if self.lam < 1.0 or not 0.0 <= self.delta <= 1.0:
            raise ValueError("need lam >= 1 and delta in [0, 1]")

    @property
    def params(self) -> SensitivityParams:
        return SensitivityParams.symmetric(self.lam, Recommended(self.delta))


def _predictor(coef, x: np.ndarray) -> np.ndarray:
    c = np.asarray(coef, dtype=float)
    k = x.shape[1]
    out = c[0] + x @ c[1 : k + 1]
    if k >= 2:
        out = out + c[k + 1] * x[:, 0] * x[:, 1]
    return out


def stratum_grid(dgp: SyntheticDgp) -> np.ndarray:
    """All covariate combinations, one row per stratum."""
    return np.array(list(itertools.product(*[range(l) for l in dgp.levels])), dtype=float)


def _law(dgp: SyntheticDgp, center: float) -> DiscreteDistribution:
    if dgp.outcome_kind == "binary":
        return DiscreteDistribution.bernoulli(float(expit(center)))
    return DiscreteDistribution(center + np.asarray(dgp.noise_support), dgp.noise_probs)


def population_strata(dgp: SyntheticDgp) -> list[DiscreteStratum]:
    grid = stratum_grid(dgp)
    weight = 1.0 / grid.shape[0]
    pi = expit(_predictor(dgp.propensity_coef, grid))
    c1 = _predictor(dgp.treated_coef, grid)
    c0 = _predictor(dgp.control_coef, grid)
    return [
        DiscreteStratum(weight, float(pi[i]), _law(dgp, c1[i]), _law(dgp, c0[i]))
        for i in range(grid.shape[0])
    ]


def truth_sidecar(dgp: SyntheticDgp) -> dict:
    """Exact population bounds and per-stratum shrinkage factors."""
    strata = population_strata(dgp)
    params = dgp.params
    pb = population_bounds(params, strata)
    mp = params.mirrored()
    psi1 = [psi_factors(params, summarize(s.treated, params.tau)) for s in strata]
    psi0 = [psi_factors(mp, summarize(s.control, mp.tau)) for s in strata]
    return {
        "dgp": asdict(dgp),
        "lambda": dgp.lam,
        "delta": dgp.delta,
        "mu1_lower": pb.mu1_lower,
        "mu1_upper": pb.mu1_upper,
        "mu0_lower": pb.mu0_lower,
        "mu0_upper": pb.mu0_upper,
        "ate_lower": pb.ate_lower,
        "ate_upper": pb.ate_upper,
        "psi_treated": [list(p) for p in psi1],
        "psi_control": [list(p) for p in psi0],
    }


@dataclass(frozen=True)
class SyntheticSample:
    data: Dataset
    stratum: np.ndarray
    truth: dict
    confounder: np.ndarray | None = field(default=None, repr=False)
    y1_full: np.ndarray | None = field(default=None, repr=False)


def generate_synthetic(dgp: SyntheticDgp, seed: int, *, full_data: bool = False) -> SyntheticSample:
    """Draw ``dgp.n`` observed rows plus the exact truth.

    With ``full_data`` the confounder ``U`` and the treated-arm potential
    outcome of every unit are also drawn from the worst case for the upper
    ``mu1`` bound; the observed rows are identical either way.
    """
    obs_rng, full_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    grid = stratum_grid(dgp)
    strata = population_strata(dgp)
    idx = obs_rng.integers(0, grid.shape[0], size=dgp.n)
    x = grid[idx]
    pi = np.array([s.propensity for s in strata])[idx]
    t = (obs_rng.random(dgp.n) < pi).astype(float)
    draw = obs_rng.random(dgp.n)
    y = np.empty(dgp.n)
    for i, s in enumerate(strata):
        for arm, law in ((1, s.treated), (0, s.control)):
            rows = np.flatnonzero((idx == i) & (t == arm))
            cum = np.cumsum(law.probs)
            pos = np.minimum(np.searchsorted(cum, draw[rows], side="right"), law.support.size - 1)
            y[rows] = law.support[pos]
    names = tuple(f"x{j + 1}" for j in range(len(dgp.levels)))
    data = Dataset(y, t, x, names)
    truth = truth_sidecar(dgp)
    if not full_data:
        return SyntheticSample(data, idx, truth)

    u = np.zeros(dgp.n)
    y1 = y.copy()
    params = dgp.params
    for i, s in enumerate(strata):
        wc = worst_case_construction(params, s.treated, "upper")
        c = wc.u_prob_t1
        treated = np.flatnonzero((idx == i) & (t == 1))
        control = np.flatnonzero((idx == i) & (t == 0))
        # Treated units: U given the observed outcome.
        pos = np.searchsorted(wc.support, y[treated])
        p_obs = c * wc.laws[1][pos] + (1 - c) * wc.laws[0][pos]
        u[treated] = full_rng.random(treated.size) < c * wc.laws[1][pos] / p_obs
        # Control units: U from the reweighted law, then the counterfactual outcome.
        u1_control = wc.lambda_of_u[1] * c
        u[control] = full_rng.random(control.size) < u1_control
        for val in (0, 1):
            rows = control[u[control] == val]
            y1[rows] = full_rng.choice(wc.support, size=rows.size, p=wc.laws[val] / wc.laws[val].sum())
    return SyntheticSample(data, idx, truth, u, y1)
