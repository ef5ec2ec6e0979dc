"""Closed-form sharp bounds under the marginal sensitivity model and its
outcome-restricted extension.

All functions here are pure.  Conditioning on covariates is implicit: a
``ConditionalSummary`` describes the treated-arm outcome law within one
covariate stratum, and population bounds are obtained with
:func:`aggregate_mu`.

Conventions used throughout:

* ``inf`` is a legal value for the outcome deviations ``delta1``/``delta2``.
* ``0 * inf`` is taken to be 0 (a zero-width term never contributes).
* ``0 / 0`` in a quantile-loss ratio is 1 and ``x / 0`` with ``x > 0`` is inf.
* Quantiles are left quantiles, i.e. the smallest minimiser of the expected
  check loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

INF = math.inf

# Tolerance used when comparing a cumulative probability with tau.  Without it
# F(y) = 0.6666666666666666 would fail to reach tau = 2/3 after rounding.
_CDF_TOL = 1e-12


# ---------------------------------------------------------------------------
# inf-aware scalar helpers
# ---------------------------------------------------------------------------


def _mul(a: float, b: float) -> float:
    if a == 0.0 or b == 0.0:
        return 0.0
    return a * b


def _ratio(num: float, den: float) -> float:
    """num / den with 0/0 -> 1 and x/0 -> inf for x > 0."""
    if den == 0.0:
        return 1.0 if num == 0.0 else INF
    return num / den


def odds(x: float) -> float:
    """x / (1 - x) with odds(1) = inf."""
    if x >= 1:
        return INF
    return x / (1 - x)


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MsmUnrestricted:
    """No outcome restriction: the plain marginal sensitivity model."""


@dataclass(frozen=True)
class ExplicitDeltas:
    """Outcome deviations bounded in ``[-delta1, delta2]`` (inf allowed)."""

    delta1: float
    delta2: float

    def __post_init__(self) -> None:
        if not (self.delta1 >= 0.0 and self.delta2 >= 0.0):
            raise ValueError(f"deltas must be nonnegative, got {self.delta1}, {self.delta2}")


@dataclass(frozen=True)
class Recommended:
    """Deviations proportional to the optimised quantile losses, scaled by ``delta``."""

    delta: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


OutcomeSpec = Union[MsmUnrestricted, ExplicitDeltas, Recommended]


@dataclass(frozen=True)
class SensitivityParams:
    """Treatment odds-ratio limits ``lambda1 <= 1 <= lambda2`` and an outcome spec."""

    lambda1: float
    lambda2: float
    outcome_spec: OutcomeSpec = field(default_factory=MsmUnrestricted)

    def __post_init__(self) -> None:
        if not (0.0 <= self.lambda1 <= 1.0 <= self.lambda2):
            raise ValueError(
                f"need 0 <= lambda1 <= 1 <= lambda2, got ({self.lambda1}, {self.lambda2})"
            )
        if not math.isfinite(self.lambda2):
            raise ValueError("lambda2 must be finite")

    @classmethod
    def symmetric(cls, lam: float, outcome_spec: OutcomeSpec | None = None) -> "SensitivityParams":
        """The usual ``(1/lam, lam)`` choice."""
        return cls(1.0 / lam, lam, outcome_spec or MsmUnrestricted())

    @property
    def tau(self) -> float:
        return tau(self.lambda1, self.lambda2)

    @property
    def width(self) -> float:
        return self.lambda2 - self.lambda1

    def mirrored(self) -> "SensitivityParams":
        """Parameters for the control arm: limits ``(1/lambda2, 1/lambda1)``."""
        if self.lambda1 == 0.0:
            raise ValueError("control-arm bounds need lambda1 > 0")
        return SensitivityParams(1.0 / self.lambda2, 1.0 / self.lambda1, self.outcome_spec)

    def with_spec(self, outcome_spec: OutcomeSpec) -> "SensitivityParams":
        return SensitivityParams(self.lambda1, self.lambda2, outcome_spec)


# ---------------------------------------------------------------------------
# Check loss and discrete outcome laws
# ---------------------------------------------------------------------------


def tau(lambda1: float, lambda2: float) -> float:
    """Quantile level ``(lambda2 - 1) / (lambda2 - lambda1)``; 1/2 when both are 1."""
    if lambda1 == lambda2:
        # 1/2 in the input's number type, so Fraction inputs stay exact.
        return lambda2 / (lambda2 + lambda2)
    return (lambda2 - 1) / (lambda2 - lambda1)


def check_loss(tau_level, y, q):
    """``tau * (y - q)_+ + (1 - tau) * (q - y)_+``, elementwise."""
    r = np.subtract(y, q)
    out = tau_level * np.maximum(r, 0.0) + (1.0 - tau_level) * np.maximum(-r, 0.0)
    if np.ndim(out) == 0:
        return float(out)
    return out


def binary_quantile_losses(tau_level: float, p1: float) -> tuple[float, float]:
    """Optimised tau and (1 - tau) check losses of a Bernoulli(p1) outcome."""
    first = min((1.0 - tau_level) * (1.0 - p1), tau_level * p1)
    second = min((1.0 - tau_level) * p1, tau_level * (1.0 - p1))
    return first, second


class DiscreteDistribution:
    """Finite-support law with sorted, de-duplicated support points."""

    def __init__(self, values: Iterable[float], probs: Iterable[float], *, atol: float = 1e-12):
        v = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
        p = np.asarray(list(probs) if not isinstance(probs, np.ndarray) else probs, dtype=float)
        if v.size == 0:
            raise ValueError("distribution has empty support")
        if v.shape != p.shape:
            raise ValueError("values and probs must have the same length")
        if np.any(p < 0) or not np.all(np.isfinite(v)):
            raise ValueError("probabilities must be nonnegative and values finite")
        if abs(p.sum() - 1.0) > atol:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        support, inverse = np.unique(v, return_inverse=True)
        merged = np.zeros(support.size)
        np.add.at(merged, inverse, p)
        keep = merged > 0
        if not np.any(keep):
            raise ValueError("distribution has empty support")
        self.support = support[keep]
        self.probs = merged[keep]
        self.support.setflags(write=False)
        self.probs.setflags(write=False)

    @classmethod
    def bernoulli(cls, p1: float) -> "DiscreteDistribution":
        return cls([0.0, 1.0], [1.0 - p1, p1])

    def __repr__(self) -> str:
        return f"DiscreteDistribution(support={self.support.tolist()}, probs={self.probs.tolist()})"

    @property
    def mean(self) -> float:
        return float(self.support @ self.probs)

    def cdf(self, y: float) -> float:
        return float(self.probs[self.support <= y].sum())

    def quantile(self, tau_level: float) -> float:
        """Smallest support point whose cumulative mass reaches ``tau_level``."""
        cum = np.cumsum(self.probs)
        idx = int(np.searchsorted(cum, tau_level - _CDF_TOL, side="left"))
        return float(self.support[min(idx, self.support.size - 1)])

    def expected_check_loss(self, tau_level: float, q: float) -> float:
        return float(self.probs @ check_loss(tau_level, self.support, q))

    def optimized_loss(self, tau_level: float) -> float:
        return self.expected_check_loss(tau_level, self.quantile(tau_level))

    def negated(self) -> "DiscreteDistribution":
        return DiscreteDistribution(-self.support, self.probs)


@dataclass(frozen=True)
class ConditionalSummary:
    """Outcome summaries for one arm within one covariate stratum."""

    cond_mean: float
    q_tau: float
    q_one_minus_tau: float
    qloss_tau: float
    qloss_one_minus_tau: float

    def __post_init__(self) -> None:
        if self.qloss_tau < 0 or self.qloss_one_minus_tau < 0:
            raise ValueError("quantile losses must be nonnegative")


def summarize(dist: DiscreteDistribution, tau_level: float) -> ConditionalSummary:
    q_hi = dist.quantile(tau_level)
    q_lo = dist.quantile(1.0 - tau_level)
    return ConditionalSummary(
        cond_mean=dist.mean,
        q_tau=q_hi,
        q_one_minus_tau=q_lo,
        qloss_tau=dist.expected_check_loss(tau_level, q_hi),
        qloss_one_minus_tau=dist.expected_check_loss(1.0 - tau_level, q_lo),
    )


def binary_summary(p1: float, tau_level: float) -> ConditionalSummary:
    first, second = binary_quantile_losses(tau_level, p1)
    dist = DiscreteDistribution.bernoulli(p1) if 0.0 < p1 < 1.0 else None
    if dist is None:
        q = float(p1)
        return ConditionalSummary(float(p1), q, q, first, second)
    return ConditionalSummary(
        float(p1), dist.quantile(tau_level), dist.quantile(1.0 - tau_level), first, second
    )


# ---------------------------------------------------------------------------
# Outcome deviations and psi factors
# ---------------------------------------------------------------------------


def recommended_deltas(
    delta: float, tau_level: float, qloss_tau: float, qloss_one_minus_tau: float
) -> tuple[float, float]:
    """Return ``(delta1, delta2)`` for the recommended specification."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if tau_level >= 0.5:
        c = _ratio(delta, 1.0 - tau_level) if delta > 0 else 0.0
        return _mul(c, qloss_one_minus_tau), _mul(c, qloss_tau)
    c = delta / tau_level if delta > 0 else 0.0
    return _mul(c, qloss_tau), _mul(c, qloss_one_minus_tau)


def resolve_deltas(params: SensitivityParams, summary: ConditionalSummary) -> tuple[float, float]:
    spec = params.outcome_spec
    if isinstance(spec, MsmUnrestricted):
        return INF, INF
    if isinstance(spec, ExplicitDeltas):
        return spec.delta1, spec.delta2
    return recommended_deltas(spec.delta, params.tau, summary.qloss_tau, summary.qloss_one_minus_tau)


def psi_factors(params: SensitivityParams, summary: ConditionalSummary) -> tuple[float, float]:
    """Shrinkage factors ``(psi_plus, psi_minus)`` in [0, 1]."""
    t = params.tau
    d1, d2 = resolve_deltas(params, summary)
    lu, ll = summary.qloss_tau, summary.qloss_one_minus_tau
    psi_plus = min(_ratio(_mul(t, d1), lu), _ratio(_mul(1.0 - t, d2), lu), 1.0)
    psi_minus = min(_ratio(_mul(1.0 - t, d1), ll), _ratio(_mul(t, d2), ll), 1.0)
    return psi_plus, psi_minus


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundResult:
    """Lower/upper bound pair together with the shrinkage factors behind it."""

    lower: float
    upper: float
    psi_plus: float
    psi_minus: float
    tau: float

    def __post_init__(self) -> None:
        if self.lower > self.upper + 1e-12 * max(1.0, abs(self.upper)):
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")


def emsm_conditional_bounds(params: SensitivityParams, summary: ConditionalSummary) -> BoundResult:
    """Sharp conditional bounds on ``E(Y^1 | T=0, X)``."""
    psi_p, psi_m = psi_factors(params, summary)
    w = params.width
    upper = summary.cond_mean + _mul(w, _mul(psi_p, summary.qloss_tau))
    lower = summary.cond_mean - _mul(w, _mul(psi_m, summary.qloss_one_minus_tau))
    return BoundResult(lower, upper, psi_p, psi_m, params.tau)


def msm_conditional_bounds(params: SensitivityParams, summary: ConditionalSummary) -> BoundResult:
    return emsm_conditional_bounds(params.with_spec(MsmUnrestricted()), summary)


def emsm_conditional_bounds0(params: SensitivityParams, summary0: ConditionalSummary) -> BoundResult:
    """Sharp conditional bounds on ``E(Y^0 | T=1, X)``.

    ``summary0`` must describe the control-arm outcome law at the mirrored
    level ``params.mirrored().tau``.
    """
    return emsm_conditional_bounds(params.mirrored(), summary0)


def upper_spec_lower_bound(
    params: SensitivityParams, delta: float, summary: ConditionalSummary
) -> float:
    """Diagnostic: sharp lower bound when both deviations follow the upper-bound
    specification ``[-delta/tau, delta/(1-tau)] * qloss_tau`` (tau >= 1/2).

    Unlike the recommended specification it does not recover the unrestricted
    lower bound at ``delta = 1``.
    """
    t = params.tau
    if t < 0.5:
        raise ValueError("diagnostic defined for tau >= 1/2")
    shrink = _mul(delta * (1.0 - t) / t, summary.qloss_tau) if t > 0 else 0.0
    return summary.cond_mean - _mul(params.width, shrink)


def emsm_binary_bounds(p1: float, prob_t0: float, params: SensitivityParams) -> BoundResult:
    """Population bounds on ``E(Y^1)`` for a binary outcome without covariates."""
    if not (0.0 <= p1 <= 1.0 and 0.0 <= prob_t0 <= 1.0):
        raise ValueError("p1 and prob_t0 must lie in [0, 1]")
    summary = binary_summary(p1, params.tau)
    t = params.tau
    d1, d2 = resolve_deltas(params, summary)
    up_term = min(_mul(t, d1), _mul(1.0 - t, d2), summary.qloss_tau)
    lo_term = min(_mul(1.0 - t, d1), _mul(t, d2), summary.qloss_one_minus_tau)
    scale = _mul(prob_t0, params.width)
    upper = p1 + _mul(scale, up_term)
    lower = p1 - _mul(scale, lo_term)
    assert -1e-12 <= lower <= upper <= 1.0 + 1e-12, (lower, upper)
    psi_p, psi_m = psi_factors(params, summary)
    return BoundResult(lower, upper, psi_p, psi_m, t)


def dual_bound_at_q(
    params: SensitivityParams, q: float, dist: DiscreteDistribution
) -> float:
    """Relaxed upper bound obtained by plugging an arbitrary ``q`` into the
    check-loss term; its minimum over ``q`` is the sharp upper bound."""
    t = params.tau
    summary = summarize(dist, t)
    d1, d2 = resolve_deltas(params, summary)
    term = min(_mul(t, d1), _mul(1.0 - t, d2), dist.expected_check_loss(t, q))
    return dist.mean + _mul(params.width, term)


# ---------------------------------------------------------------------------
# Worst-case binary confounder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorstCaseConstruction:
    """Binary confounder attaining the sharp bound.

    ``laws[u]`` holds the outcome probabilities on ``support`` given ``U = u``
    among the untreated counterfactual; ``u_prob_t1`` is ``Q(U = 1 | T = 1)``.
    """

    support: np.ndarray
    u_prob_t1: float
    lambda_of_u: tuple[float, float]
    laws: tuple[np.ndarray, np.ndarray]
    eta: tuple[float, float]
    psi: float
    bound: float

    def attained_value(self) -> float:
        c = self.u_prob_t1
        return self.eta[1] * self.lambda_of_u[1] * c + self.eta[0] * self.lambda_of_u[0] * (1.0 - c)


def _upper_construction(
    params: SensitivityParams, dist: DiscreteDistribution, psi: float
) -> WorstCaseConstruction:
    t = params.tau
    y, p = dist.support, dist.probs
    m = dist.mean
    degenerate = y.size == 1 or t <= 0.0 or t >= 1.0 or params.lambda1 == params.lambda2
    if degenerate:
        # Every bound term vanishes here, so both laws equal the observed one.
        law = p.copy()
        return WorstCaseConstruction(
            y, 1.0 - t, (params.lambda1, params.lambda2), (law, law.copy()), (m, m), psi, m
        )
    q = dist.quantile(t)
    above, below, at = y > q, y < q, y == q
    p_plus, p_minus, p_at = p[above].sum(), p[below].sum(), p[at].sum()

    law1 = np.empty_like(p)
    law1[above] = (1.0 + t / (1.0 - t) * psi) * p[above]
    law1[below] = (1.0 - psi) * p[below]
    law1[at] = (1.0 - psi) * p_at + psi * (1.0 - p_plus / (1.0 - t))

    law0 = np.empty_like(p)
    law0[above] = (1.0 - psi) * p[above]
    law0[below] = (1.0 + (1.0 - t) / t * psi) * p[below]
    law0[at] = (1.0 - psi) * p_at + psi * (1.0 - p_minus / t)

    # Rounding can leave -1e-17 on an atom that is exactly zero in closed form.
    law0 = np.where(np.abs(law0) < 1e-15, 0.0, law0)
    law1 = np.where(np.abs(law1) < 1e-15, 0.0, law1)
    eta = (float(y @ law0), float(y @ law1))
    loss = dist.expected_check_loss(t, q)
    bound = m + _mul(params.width, _mul(psi, loss))
    return WorstCaseConstruction(
        y, 1.0 - t, (params.lambda1, params.lambda2), (law0, law1), eta, psi, bound
    )


def worst_case_construction(
    params: SensitivityParams, dist: DiscreteDistribution, side: str = "upper"
) -> WorstCaseConstruction:
    """Binary-confounder distribution attaining the upper (or lower) sharp bound.

    The lower-bound construction is the upper construction for ``-Y`` with the
    two deviation limits swapped, mapped back to the original scale.
    """
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")
    summary = summarize(dist, params.tau)
    psi_p, psi_m = psi_factors(params, summary)
    if side == "upper":
        return _upper_construction(params, dist, psi_p)
    neg = _upper_construction(params, dist.negated(), psi_m)
    order = np.argsort(-neg.support)
    laws = (neg.laws[0][order], neg.laws[1][order])
    return WorstCaseConstruction(
        -neg.support[order],
        neg.u_prob_t1,
        neg.lambda_of_u,
        laws,
        (-neg.eta[0], -neg.eta[1]),
        psi_m,
        -neg.bound,
    )


# ---------------------------------------------------------------------------
# Aggregation over strata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StratumBounds:
    """Per-stratum ingredients for population bounds."""

    weight: float
    propensity: float
    treated_mean: float
    control_mean: float
    nu1: BoundResult
    nu0: BoundResult | None = None


@dataclass(frozen=True)
class PopulationBounds:
    mu1_lower: float
    mu1_upper: float
    mu0_lower: float | None
    mu0_upper: float | None
    ate_lower: float | None
    ate_upper: float | None


def aggregate_mu(strata: Sequence[StratumBounds]) -> PopulationBounds:
    """Average conditional bounds over strata.

    ``mu1 = E{T Y + (1 - T) nu1(X)}`` and ``mu0 = E{(1 - T) Y + T nu0(X)}``;
    ATE bounds contrast the opposite-side arm bounds.
    """
    w = np.array([s.weight for s in strata], dtype=float)
    if abs(w.sum() - 1.0) > 1e-10:
        raise ValueError(f"stratum weights sum to {w.sum()!r}, not 1")
    pi = np.array([s.propensity for s in strata])
    m1 = np.array([s.treated_mean for s in strata])
    mu1_up = float(w @ (pi * m1 + (1 - pi) * np.array([s.nu1.upper for s in strata])))
    mu1_lo = float(w @ (pi * m1 + (1 - pi) * np.array([s.nu1.lower for s in strata])))
    if any(s.nu0 is None for s in strata):
        return PopulationBounds(mu1_lo, mu1_up, None, None, None, None)
    m0 = np.array([s.control_mean for s in strata])
    mu0_up = float(w @ ((1 - pi) * m0 + pi * np.array([s.nu0.upper for s in strata])))
    mu0_lo = float(w @ ((1 - pi) * m0 + pi * np.array([s.nu0.lower for s in strata])))
    return PopulationBounds(mu1_lo, mu1_up, mu0_lo, mu0_up, mu1_lo - mu0_up, mu1_up - mu0_lo)


@dataclass(frozen=True)
class DiscreteStratum:
    """One covariate stratum of a finite-support observed-data law."""

    weight: float
    propensity: float
    treated: DiscreteDistribution
    control: DiscreteDistribution


def stratum_bounds(params: SensitivityParams, stratum: DiscreteStratum, with_control: bool = True) -> StratumBounds:
    nu1 = emsm_conditional_bounds(params, summarize(stratum.treated, params.tau))
    nu0 = None
    if with_control:
        mp = params.mirrored()
        nu0 = emsm_conditional_bounds(mp, summarize(stratum.control, mp.tau))
    return StratumBounds(
        stratum.weight, stratum.propensity, stratum.treated.mean, stratum.control.mean, nu1, nu0
    )


def population_bounds(params: SensitivityParams, strata: Sequence[DiscreteStratum]) -> PopulationBounds:
    """Exact population bounds for a finite-support observed-data law."""
    return aggregate_mu([stratum_bounds(params, s, params.lambda1 > 0) for s in strata])
