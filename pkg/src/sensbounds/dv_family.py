"""Binary-outcome bounds under risk-ratio confounding limits, and the
difference/ratio variants of the outcome restriction for general outcomes.

Three binary-outcome bound families are provided, from loosest to sharpest:
the bounding-factor bounds, the same bounds with the factor capped so that
probabilities stay below one, and the sharp bounds obtained by optimising the
outcome-deviation bounds over every deviation pair compatible with the risk
ratio limit ``theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

from .bounds_core import (
    INF,
    BoundResult,
    ConditionalSummary,
    ExplicitDeltas,
    SensitivityParams,
    _mul,
    binary_quantile_losses,
    emsm_conditional_bounds,
    odds,
    tau,
)

UNDEFINED = "undefined"
Ratio = Union[float, str]


@dataclass(frozen=True)
class DvParams:
    theta: float
    lambda1: float
    lambda2: float

    def __post_init__(self) -> None:
        if not self.theta >= 1.0:
            raise ValueError(f"theta must be >= 1, got {self.theta}")
        SensitivityParams(self.lambda1, self.lambda2)

    @property
    def tau(self) -> float:
        return tau(self.lambda1, self.lambda2)

    @property
    def inv_lambda1(self) -> float:
        return INF if self.lambda1 == 0.0 else 1.0 / self.lambda1


@dataclass(frozen=True)
class BinaryStratum:
    p1: float
    p0: float
    prob_t1: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.p1 <= 1.0 and 0.0 <= self.p0 <= 1.0):
            raise ValueError("p1 and p0 must lie in [0, 1]")
        if not 0.0 < self.prob_t1 < 1.0:
            raise ValueError("prob_t1 must lie in (0, 1)")

    @property
    def prob_t0(self) -> float:
        return 1.0 - self.prob_t1


@dataclass(frozen=True)
class DvBounds:
    mu1_lower: float
    mu1_upper: float
    mu0_lower: float
    mu0_upper: float
    crr_lower: Ratio
    crr_upper: Ratio


@dataclass(frozen=True)
class DvSharpBounds(DvBounds):
    upper_deltas: tuple[float, float]
    lower_deltas: tuple[float, float]


def bounding_factor(x: float, y: float) -> float:
    """``x y / (x + y - 1)``, with ``B(inf, y) = y`` and ``B(x, inf) = x``."""
    if math.isinf(x) and math.isinf(y):
        return INF
    if math.isinf(x):
        return y
    if math.isinf(y):
        return x
    return x * y / (x + y - 1.0)


def _crr(num: float, den: float) -> Ratio:
    if den == 0.0:
        return UNDEFINED if num == 0.0 else INF
    return num / den


def dv_original_bounds(stratum: BinaryStratum, params: DvParams) -> DvBounds:
    """Bounding-factor bounds; may exceed one and are not sharp."""
    if stratum.p0 == 0.0:
        raise ValueError("risk-ratio bounds are undefined when p0 = 0")
    p1, p0, pt1, pt0 = stratum.p1, stratum.p0, stratum.prob_t1, stratum.prob_t0
    b_up = bounding_factor(params.lambda2, params.theta)
    b_lo = bounding_factor(params.inv_lambda1, params.theta)
    orr = p1 / p0
    return DvBounds(
        mu1_lower=p1 * (pt1 + pt0 / b_lo),
        mu1_upper=p1 * (pt1 + _mul(pt0, b_up)),
        mu0_lower=p0 * (pt0 + pt1 / b_up),
        mu0_upper=p0 * (pt0 + _mul(pt1, b_lo)),
        crr_lower=orr / b_lo,
        crr_upper=_mul(orr, b_up),
    )


def sjolander_bounds(stratum: BinaryStratum, params: DvParams) -> DvBounds:
    """Bounding-factor bounds with the factor capped at ``1 / p``."""
    p1, p0, pt1, pt0 = stratum.p1, stratum.p0, stratum.prob_t1, stratum.prob_t0
    b_up = bounding_factor(params.lambda2, params.theta)
    b_lo = bounding_factor(params.inv_lambda1, params.theta)
    cap1 = min(b_up, 1.0 / p1) if p1 > 0 else b_up
    cap0 = min(b_lo, 1.0 / p0) if p0 > 0 else b_lo
    mu1_up = p1 * (pt1 + _mul(pt0, cap1))
    mu1_lo = p1 * (pt1 + pt0 / b_lo)
    mu0_up = p0 * (pt0 + _mul(pt1, cap0))
    mu0_lo = p0 * (pt0 + pt1 / b_up)
    return DvBounds(mu1_lo, mu1_up, mu0_lo, mu0_up, _crr(mu1_lo, mu0_up), _crr(mu1_up, mu0_lo))


def _sharp_terms(p: float, t: float, theta: float) -> tuple[float, float, tuple[float, float], tuple[float, float]]:
    """Shrunken loss terms and attaining deviation pairs for one arm.

    Returns ``(upper_term, lower_term, (d1_up, d2_up), (d1_lo, d2_lo))`` where
    the terms multiply ``P(other arm) * width``.
    """
    loss_hi, loss_lo = binary_quantile_losses(t, p)
    if math.isinf(theta):
        # (theta - 1) / (odds + theta) -> 1 and (theta - 1) / (1 + odds * theta) -> 1 / odds
        d1u, d2u = p, _mul(p, odds(t))
        d1l, d2l = p, _mul(p, odds(1.0 - t))
    else:
        g = (theta - 1.0) * p
        d1u = _div_inf(g, odds(t) + theta)
        d2u = _div_inf(g, 1.0 + _mul(odds(1.0 - t), theta))
        d1l = _div_inf(g, odds(1.0 - t) + theta)
        d2l = _div_inf(g, 1.0 + _mul(odds(t), theta))
    up = min(_mul(t, d1u), _mul(1.0 - t, d2u), loss_hi)
    lo = min(_mul(1.0 - t, d1l), _mul(t, d2l), loss_lo)
    return up, lo, (d1u, d2u), (d1l, d2l)


def _div_inf(num: float, den: float) -> float:
    if math.isinf(den):
        return 0.0
    return num / den


def dv_sharp_bounds(stratum: BinaryStratum, params: DvParams) -> DvSharpBounds:
    """Sharp bounds under the treatment odds limits plus a risk-ratio limit ``theta``."""
    p1, p0, pt1, pt0 = stratum.p1, stratum.p0, stratum.prob_t1, stratum.prob_t0
    t = params.tau
    up1, lo1, dev_up, dev_lo = _sharp_terms(p1, t, params.theta)
    w1 = params.lambda2 - params.lambda1
    mu1_up = p1 + _mul(pt0 * w1, up1)
    mu1_lo = p1 - _mul(pt0 * w1, lo1)
    if params.lambda1 == 0.0:
        raise ValueError("control-arm bounds need lambda1 > 0")
    l1p, l2p = 1.0 / params.lambda2, 1.0 / params.lambda1
    tp = tau(l1p, l2p)
    up0, lo0, _, _ = _sharp_terms(p0, tp, params.theta)
    w0 = l2p - l1p
    mu0_up = p0 + _mul(pt1 * w0, up0)
    mu0_lo = p0 - _mul(pt1 * w0, lo0)
    return DvSharpBounds(
        mu1_lo,
        mu1_up,
        mu0_lo,
        mu0_up,
        _crr(mu1_lo, mu0_up),
        _crr(mu1_up, mu0_lo),
        dev_up,
        dev_lo,
    )


def dv_sharp_mu1(p1: float, prob_t0: float, lambda1: float, lambda2: float, theta: float) -> tuple[float, float]:
    """Treated-arm sharp bounds only; allows ``lambda1 = 0``."""
    up, lo, _, _ = _sharp_terms(p1, tau(lambda1, lambda2), theta)
    scale = prob_t0 * (lambda2 - lambda1)
    return p1 - _mul(scale, lo), p1 + _mul(scale, up)


def relaxed_crr_lower(orr: float, lam: float, theta: float) -> float:
    """Diagnostic lower CRR limit ``ORR / ((lam theta + 1) / (lam + theta))``."""
    return orr / ((lam * theta + 1.0) / (lam + theta))


def theta_from_delta(delta: float, tau_level: float, p1: float, side: str = "upper") -> float:
    """Risk-ratio limit implied by the recommended deviation specification."""
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    if side == "upper":
        a, b = odds(tau_level), odds(1.0 - tau_level)
    elif side == "lower":
        a, b = odds(1.0 - tau_level), odds(tau_level)
    else:
        raise ValueError("side must be 'upper' or 'lower'")
    k = min(a, odds(1.0 - p1))
    den = 1.0 - delta * _mul(b, k)
    if den <= 0.0:
        return INF
    return (1.0 + _mul(delta, k)) / den


def theta_plus_minus(delta: float, tau_level: float) -> tuple[float, float]:
    """Data-independent envelopes of :func:`theta_from_delta` over ``p1``."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    if delta == 1:
        return INF, INF
    plus = (1 + _mul(delta, odds(tau_level))) / (1 - delta)
    minus = (1 + _mul(delta, odds(1 - tau_level))) / (1 - delta)
    return plus, minus


def theta_grid(delta: float, tau_level: float) -> list[float | None]:
    """``[theta+/2, theta+, 3 theta+/2]`` with entries below one reported as None."""
    plus, _ = theta_plus_minus(delta, tau_level)
    return [v if v >= 1.0 else None for v in (plus / 2.0, plus, 1.5 * plus)]


def dmsm_bounds(delta_total: float, summary: ConditionalSummary, params: SensitivityParams) -> BoundResult:
    """Bounds when the confounder-specific means differ by at most ``delta_total``."""
    if not delta_total >= 0.0:
        raise ValueError("delta_total must be nonnegative")
    t = params.tau
    spread = _mul(t * (1.0 - t), delta_total)
    up = min(spread, summary.qloss_tau)
    lo = min(spread, summary.qloss_one_minus_tau)
    w = params.width
    return BoundResult(
        summary.cond_mean - _mul(w, lo),
        summary.cond_mean + _mul(w, up),
        _share(up, summary.qloss_tau),
        _share(lo, summary.qloss_one_minus_tau),
        t,
    )


def dmsm_as_emsm(delta_total: float, summary: ConditionalSummary, params: SensitivityParams) -> BoundResult:
    """The same bounds via the two equivalent explicit-deviation specifications."""
    t = params.tau
    up = emsm_conditional_bounds(
        params.with_spec(ExplicitDeltas(_mul(1 - t, delta_total), _mul(t, delta_total))), summary
    )
    lo = emsm_conditional_bounds(
        params.with_spec(ExplicitDeltas(_mul(t, delta_total), _mul(1 - t, delta_total))), summary
    )
    return BoundResult(lo.lower, up.upper, up.psi_plus, lo.psi_minus, t)


def rmsm_bounds(theta: float, summary: ConditionalSummary, params: SensitivityParams) -> BoundResult:
    """Bounds when confounder-specific means differ by at most a factor ``theta``.

    Needs a nonnegative outcome.
    """
    if not theta >= 1.0:
        raise ValueError("theta must be >= 1")
    m = summary.cond_mean
    if m < 0.0:
        raise ValueError("ratio restriction needs a nonnegative outcome mean")
    t = params.tau
    if math.isinf(theta):
        up_cap, lo_cap = INF, INF
    elif t <= 0.0 or t >= 1.0:
        up_cap, lo_cap = 0.0, 0.0
    else:
        up_cap = m * (theta - 1.0) / (1.0 / (1.0 - t) + theta / t)
        lo_cap = m * (theta - 1.0) / (theta / (1.0 - t) + 1.0 / t)
    if m == 0.0:
        up_cap = lo_cap = 0.0
    up = min(up_cap, summary.qloss_tau)
    lo = min(lo_cap, summary.qloss_one_minus_tau)
    w = params.width
    return BoundResult(
        m - _mul(w, lo),
        m + _mul(w, up),
        _share(up, summary.qloss_tau),
        _share(lo, summary.qloss_one_minus_tau),
        t,
    )


def _share(term: float, loss: float) -> float:
    return 1.0 if loss == 0.0 else min(term / loss, 1.0)
