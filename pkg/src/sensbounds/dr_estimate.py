"""Doubly robust sample bounds under the recommended outcome specification.

For the treated arm the upper bound is the mean of the augmented
inverse-probability-weighted score

    phi_1+ = T Y / pi + T (1 - pi) / pi * w * rho_tau(Y, q) - (T / pi - 1) m_+

with ``w = (lambda2 - lambda1) * delta``.  Its expectation equals the
q-relaxed population bound when either the propensity ``pi`` or the
regression ``m_+`` of the transformed response is correct, and equals the
sharp bound when ``q`` is also the conditional ``tau``-quantile.  The lower
bound and the control arm follow by the usual sign and arm swaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .bounds_core import DiscreteStratum, check_loss, tau
from .dataset import Dataset
from .model_fit import (
    Design,
    DesignSpec,
    FitResult,
    LassoConfig,
    build_design,
    fit_cal_logistic,
    fit_rcal_lasso,
    fit_weighted_logistic_mean,
    fit_weighted_ls,
    fit_weighted_quantile,
    logistic_mean_values,
    propensity,
    unit_range,
)

SIDES = ("upper", "lower")
ARMS = (1, 0)
METHODS = ("CAL", "RCAL")
MEAN_MODELS = ("linear", "logistic")


def arm_constants(lambda1: float, lambda2: float, delta: float, arm: int) -> tuple[float, float]:
    """(check-loss weight, quantile level) used in the arm's estimating function.

    The control arm uses the reciprocal limits ``(1/lambda2, 1/lambda1)``
    with the same ``delta``.
    """
    if arm == 1:
        return (lambda2 - lambda1) * delta, tau(lambda1, lambda2)
    if lambda1 <= 0:
        raise ValueError("control-arm bounds need lambda1 > 0")
    return (1.0 / lambda1 - 1.0 / lambda2) * delta, tau(1.0 / lambda2, 1.0 / lambda1)


def side_level(tau_level: float, side: str) -> float:
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    return tau_level if side == "upper" else 1.0 - tau_level


def transformed_response(y, q, loss_weight: float, tau_level: float, side: str) -> np.ndarray:
    """``Y + w rho_tau(Y, q)`` (upper) or ``Y - w rho_{1-tau}(Y, q)`` (lower)."""
    level = side_level(tau_level, side)
    sign = 1.0 if side == "upper" else -1.0
    return np.asarray(y, float) + sign * loss_weight * check_loss(level, np.asarray(y, float), q)


def phi_eval(side: str, arm: int, y, t, pi, q, m, *, loss_weight: float, tau_level: float):
    """Per-unit estimating-function values.

    ``pi`` is always the probability of treatment; ``tau_level`` and
    ``loss_weight`` are the arm's constants from :func:`arm_constants`.
    """
    y = np.asarray(y, float)
    t = np.asarray(t, float)
    pi = np.asarray(pi, float)
    if np.any((pi <= 0) | (pi >= 1)):
        raise ValueError("propensity values must lie strictly inside (0, 1)")
    if arm == 1:
        s, p_arm = t, pi
    elif arm == 0:
        s, p_arm = 1.0 - t, 1.0 - pi
    else:
        raise ValueError("arm must be 0 or 1")
    ytil = transformed_response(y, q, loss_weight, tau_level, side)
    m = np.asarray(m, float)
    return s * y + (1.0 - s) * m + s * (1.0 - p_arm) / p_arm * (ytil - m)


def normal_quantile(upper_tail: float) -> float:
    """``z_c`` with ``P(Z > z_c) = c``."""
    return float(stats.norm.ppf(1.0 - upper_tail))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateReport:
    """Point bounds, influence-function variances and Wald intervals."""

    estimand: str
    lam: float
    delta: float
    method: str
    n: int
    level: float
    mu_hat_lower: float
    mu_hat_upper: float
    var_lower: float
    var_upper: float
    phi_lower: np.ndarray | None = field(default=None, repr=False, compare=False)
    phi_upper: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def se_lower(self) -> float:
        return math.sqrt(self.var_lower / self.n)

    @property
    def se_upper(self) -> float:
        return math.sqrt(self.var_upper / self.n)

    @property
    def ci_one_sided(self) -> tuple[float, float]:
        z = normal_quantile(1.0 - self.level)
        return self.mu_hat_lower - z * self.se_lower, self.mu_hat_upper + z * self.se_upper

    @property
    def ci_two_sided(self) -> tuple[float, float]:
        z = normal_quantile((1.0 - self.level) / 2.0)
        return self.mu_hat_lower - z * self.se_lower, self.mu_hat_upper + z * self.se_upper

    @property
    def model(self) -> str:
        return "MSM" if self.delta == 1.0 else "eMSM"


def report_from_phi(estimand, lam, delta, method, level, phi_lower, phi_upper) -> EstimateReport:
    lo, up = float(np.mean(phi_lower)), float(np.mean(phi_upper))
    return EstimateReport(
        estimand=estimand,
        lam=lam,
        delta=delta,
        method=method,
        n=int(phi_lower.size),
        level=level,
        mu_hat_lower=lo,
        mu_hat_upper=up,
        var_lower=float(np.mean((phi_lower - lo) ** 2)),
        var_upper=float(np.mean((phi_upper - up) ** 2)),
        phi_lower=phi_lower,
        phi_upper=phi_upper,
    )


def ate_report(mu1: EstimateReport, mu0: EstimateReport) -> EstimateReport:
    """``[mu1- - mu0+, mu1+ - mu0-]`` with paired-difference variances."""
    return report_from_phi(
        "ate", mu1.lam, mu1.delta, mu1.method, mu1.level,
        mu1.phi_lower - mu0.phi_upper, mu1.phi_upper - mu0.phi_lower,
    )


def _ratio_side(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    a, b = float(np.mean(num)), float(np.mean(den))
    if b <= 0:
        return math.inf, math.nan
    r = a / b
    infl = ((num - a) - r * (den - b)) / b
    return r, float(np.mean(infl**2))


def crr_report(mu1: EstimateReport, mu0: EstimateReport) -> EstimateReport:
    """Causal risk ratio bounds ``[mu1-/mu0+, mu1+/mu0-]`` with delta-method variances."""
    lo, vlo = _ratio_side(mu1.phi_lower, mu0.phi_upper)
    up, vup = _ratio_side(mu1.phi_upper, mu0.phi_lower)
    return EstimateReport(
        "crr", mu1.lam, mu1.delta, mu1.method, mu1.n, mu1.level, lo, up, vlo, vup
    )


# ---------------------------------------------------------------------------
# Fitting pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmFit:
    """Fitted nuisance functions for one (arm, side) pipeline."""

    arm: int
    side: str
    pi: np.ndarray
    q: np.ndarray
    m: np.ndarray
    fits: dict = field(compare=False)


def arm_weights(t: np.ndarray, pi: np.ndarray, arm: int) -> np.ndarray:
    """``T (1-pi)/pi`` for the treated arm, ``(1-T) pi/(1-pi)`` for the control arm."""
    if arm == 1:
        return t * (1.0 - pi) / pi
    return (1.0 - t) * pi / (1.0 - pi)


@dataclass
class Estimator:
    """Sequential propensity, quantile and mean-regression fits on one dataset.

    The propensity fit is computed once per arm; quantile fits are cached per
    quantile level, so a grid over ``delta`` only refits the mean regression.
    ``design`` serves the propensity and mean models; ``design_h`` (default:
    the same) serves the quantile model.  ``mean_model`` picks a linear or a
    logistic-scale regression of the transformed response.
    """

    data: Dataset
    method: str = "CAL"
    design_spec: DesignSpec = DesignSpec()
    lasso: LassoConfig = LassoConfig()
    design: Design | None = None
    design_h: Design | np.ndarray | None = None
    mean_model: str = "linear"
    _pi: dict = field(default_factory=dict, init=False, repr=False)
    _q: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.mean_model not in MEAN_MODELS:
            raise ValueError(f"mean_model must be one of {MEAN_MODELS}")
        n1 = int(self.data.t.sum())
        if n1 == 0 or n1 == self.data.n:
            raise ValueError("both treatment arms must be nonempty")
        if self.design is None:
            self.design = build_design(self.data.x, self.design_spec, self.data.names)
        if self.design_h is None:
            self.design_h = self.design

    def propensity(self, arm: int) -> tuple[np.ndarray, FitResult]:
        if arm not in self._pi:
            if self.method == "CAL":
                fit = fit_cal_logistic(self.design, self.data.t, arm)
            else:
                path = fit_rcal_lasso(
                    "cal_logistic", self.design, {"treatment": self.data.t, "target_arm": arm}, self.lasso
                )
                fit = path.as_fit(self.lasso.tol)
            self._pi[arm] = (propensity(self.design, fit.coef), fit)
        return self._pi[arm]

    def quantile(self, arm: int, level: float) -> tuple[np.ndarray, FitResult]:
        key = (arm, round(level, 15))
        if key not in self._q:
            pi, _ = self.propensity(arm)
            w = arm_weights(self.data.t, pi, arm)
            if self.method == "CAL":
                fit = fit_weighted_quantile(self.design_h, self.data.y, w, level)
            else:
                path = fit_rcal_lasso(
                    "weighted_quantile", self.design_h,
                    {"y": self.data.y, "weights": w, "tau": level}, self.lasso,
                )
                fit = path.as_fit(self.lasso.tol)
            h = self.design_h.matrix if isinstance(self.design_h, Design) else self.design_h
            self._q[key] = (h @ fit.coef, fit)
        return self._q[key]

    def arm_fit(self, arm: int, side: str, lambda1: float, lambda2: float, delta: float) -> ArmFit:
        loss_weight, t_level = arm_constants(lambda1, lambda2, delta, arm)
        pi, gfit = self.propensity(arm)
        q, bfit = self.quantile(arm, side_level(t_level, side))
        w = arm_weights(self.data.t, pi, arm)
        z = transformed_response(self.data.y, q, loss_weight, t_level, side)
        logistic = self.mean_model == "logistic"
        if self.method == "CAL":
            afit = (fit_weighted_logistic_mean if logistic else fit_weighted_ls)(self.design, z, w)
        elif logistic and unit_range(z, w)[0] == unit_range(z, w)[1]:
            afit = fit_weighted_logistic_mean(self.design, z, w)
        else:
            kind = "weighted_logistic" if logistic else "weighted_ls"
            path = fit_rcal_lasso(kind, self.design, {"response": z, "weights": w}, self.lasso)
            afit = replace(path.as_fit(self.lasso.tol), link_range=unit_range(z, w) if logistic else None)
        if logistic:
            m = logistic_mean_values(self.design, afit.coef, afit.link_range)
        else:
            m = self.design.matrix @ afit.coef
        return ArmFit(arm, side, pi, q, m, {"gamma": gfit, "beta": bfit, "alpha": afit})

    def phi(self, arm: int, side: str, lambda1: float, lambda2: float, delta: float) -> np.ndarray:
        fit = self.arm_fit(arm, side, lambda1, lambda2, delta)
        loss_weight, t_level = arm_constants(lambda1, lambda2, delta, arm)
        return phi_eval(
            side, arm, self.data.y, self.data.t, fit.pi, fit.q, fit.m,
            loss_weight=loss_weight, tau_level=t_level,
        )

    @property
    def label(self) -> str:
        return self.method if self.mean_model == "linear" else f"{self.method}-logit"

    def estimate_bounds(self, lam: float, delta: float, level: float = 0.9) -> list[EstimateReport]:
        """Reports for mu1, mu0, ATE and (binary outcomes) CRR at symmetric ``lam``."""
        if not 0.0 < level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if lam < 1.0:
            raise ValueError("lambda must be >= 1")
        l1, l2 = 1.0 / lam, lam
        mu1 = report_from_phi(
            "mu1", lam, delta, self.label, level,
            self.phi(1, "lower", l1, l2, delta), self.phi(1, "upper", l1, l2, delta),
        )
        mu0 = report_from_phi(
            "mu0", lam, delta, self.label, level,
            self.phi(0, "lower", l1, l2, delta), self.phi(0, "upper", l1, l2, delta),
        )
        out = [mu1, mu0, ate_report(mu1, mu0)]
        if self.data.binary_outcome:
            out.append(crr_report(mu1, mu0))
        return out


def estimate_bounds(
    data: Dataset,
    lam: float,
    delta: float,
    *,
    method: str = "CAL",
    level: float = 0.9,
    design_spec: DesignSpec = DesignSpec(),
    lasso: LassoConfig = LassoConfig(),
    mean_model: str = "linear",
) -> list[EstimateReport]:
    est = Estimator(data, method, design_spec, lasso, mean_model=mean_model)
    return est.estimate_bounds(lam, delta, level)


def run_grid(
    data: Dataset,
    lambda_grid: Sequence[float],
    delta_grid: Sequence[float],
    *,
    method: str = "CAL",
    level: float = 0.9,
    design_spec: DesignSpec = DesignSpec(),
    lasso: LassoConfig = LassoConfig(),
    mean_model: str = "linear",
) -> list[EstimateReport]:
    """All (lambda, delta) cells, sorted by (estimand, lambda, delta, method)."""
    if not len(lambda_grid) or not len(delta_grid):
        raise ValueError("grids must be nonempty")
    est = Estimator(data, method, design_spec, lasso, mean_model=mean_model)
    reports = [r for lam in lambda_grid for d in delta_grid for r in est.estimate_bounds(lam, d, level)]
    return sorted(reports, key=lambda r: (r.estimand, r.lam, r.delta, r.method))


def strip_phi(report: EstimateReport) -> EstimateReport:
    return replace(report, phi_lower=None, phi_upper=None)


# ---------------------------------------------------------------------------
# Population evaluation on finite-support laws
# ---------------------------------------------------------------------------


def expected_phi(
    strata: Sequence[DiscreteStratum],
    pi: Sequence[float],
    q: Sequence[float],
    m: Sequence[float],
    lambda1: float,
    lambda2: float,
    delta: float,
    side: str = "upper",
) -> float:
    """Exact ``E{phi_1}`` by enumeration over strata, treatment and outcome.

    ``pi``, ``q`` and ``m`` give the working-model values in each stratum and
    may differ from the true propensity and regression.
    """
    loss_weight, t_level = arm_constants(lambda1, lambda2, delta, 1)
    total = 0.0
    for s, p, qq, mm in zip(strata, pi, q, m):
        vals, probs = s.treated.support, s.treated.probs
        phi1 = phi_eval(side, 1, vals, np.ones_like(vals), np.full_like(vals, p), qq, mm,
                        loss_weight=loss_weight, tau_level=t_level)
        phi0 = phi_eval(side, 1, np.zeros(1), np.zeros(1), np.array([p]), qq, mm,
                        loss_weight=loss_weight, tau_level=t_level)[0]
        total += s.weight * (s.propensity * float(probs @ phi1) + (1.0 - s.propensity) * phi0)
    return total


def relaxed_population_bound(
    strata: Sequence[DiscreteStratum],
    q: Sequence[float],
    lambda1: float,
    lambda2: float,
    delta: float,
    side: str = "upper",
) -> float:
    """``E[T Y + (1 - T) E{Y~(q) | T = 1, X}]`` for the treated-arm bound."""
    loss_weight, t_level = arm_constants(lambda1, lambda2, delta, 1)
    total = 0.0
    for s, qq in zip(strata, q):
        ytil = transformed_response(s.treated.support, qq, loss_weight, t_level, side)
        total += s.weight * (
            s.propensity * s.treated.mean + (1.0 - s.propensity) * float(s.treated.probs @ ytil)
        )
    return total


def regression_of_transformed(
    strata: Sequence[DiscreteStratum], q: Sequence[float], lambda1, lambda2, delta, side="upper"
) -> np.ndarray:
    """True ``E{Y~(q) | T = 1, X}`` per stratum."""
    loss_weight, t_level = arm_constants(lambda1, lambda2, delta, 1)
    return np.array([
        float(s.treated.probs @ transformed_response(s.treated.support, qq, loss_weight, t_level, side))
        for s, qq in zip(strata, q)
    ])


__all__ = [
    "ArmFit",
    "EstimateReport",
    "Estimator",
    "arm_constants",
    "arm_weights",
    "ate_report",
    "crr_report",
    "estimate_bounds",
    "expected_phi",
    "normal_quantile",
    "phi_eval",
    "regression_of_transformed",
    "relaxed_population_bound",
    "report_from_phi",
    "run_grid",
    "strip_phi",
    "transformed_response",
]
