"""Brute-force checks of the closed-form bounds on small discrete instances.

Nothing here calls the closed-form bound formulas to produce its answer.
:func:`enumerate_emsm_bound` searches binary-confounder distributions on a
grid, :func:`enumerate_dv_bound` searches outcome-deviation pairs allowed by a
risk-ratio limit, and :func:`duality_scan` scans the relaxed bound over a grid
of thresholds.  Each reports the slack that its grid discretisation permits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bounds_core import (
    DiscreteDistribution,
    ExplicitDeltas,
    MsmUnrestricted,
    Recommended,
    SensitivityParams,
    WorstCaseConstruction,
    dual_bound_at_q,
    recommended_deltas,
)

_FEAS_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteInstance:
    """Finite-support observed law for one stratum plus sensitivity parameters."""

    treated: DiscreteDistribution
    params: SensitivityParams
    control: DiscreteDistribution | None = None
    prob_t1: float = 0.5


def instance_deltas(params: SensitivityParams, dist: DiscreteDistribution) -> tuple[float, float]:
    """Outcome deviation limits, computing optimised losses by exhaustive search."""
    spec = params.outcome_spec
    if isinstance(spec, MsmUnrestricted):
        return math.inf, math.inf
    if isinstance(spec, ExplicitDeltas):
        return spec.delta1, spec.delta2
    assert isinstance(spec, Recommended)
    t = params.tau
    return recommended_deltas(spec.delta, t, exhaustive_loss(dist, t), exhaustive_loss(dist, 1.0 - t))


def exhaustive_loss(dist: DiscreteDistribution, tau_level: float) -> float:
    """Minimum expected check loss, searched over every support point."""
    y, p = dist.support, dist.probs
    r = y[None, :] - y[:, None]
    losses = (tau_level * np.maximum(r, 0) + (1 - tau_level) * np.maximum(-r, 0)) @ p
    return float(losses.min())


def _tail_means(dist: DiscreteDistribution, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the lowest and of the highest probability-``c`` slice of the law."""
    y, p = dist.support, dist.probs
    cum = np.concatenate([[0.0], np.cumsum(p)])
    # Integral of the quantile function from 0 to c, piecewise linear in c.
    part = np.concatenate([[0.0], np.cumsum(p * y)])
    def integral(a):
        a = np.clip(a, 0.0, 1.0)
        k = np.clip(np.searchsorted(cum, a, side="right") - 1, 0, y.size - 1)
        return part[k] + (a - cum[k]) * y[k]
    total = part[-1]
    low = integral(c) / c
    high = (total - integral(1.0 - c)) / c
    return low, high


@dataclass(frozen=True)
class OracleResult:
    value: float
    u_prob_t1: float
    eta: tuple[float, float]
    lambda_of_u: tuple[float, float]
    slack: float
    lipschitz: float
    candidates: int


def emsm_lipschitz(params: SensitivityParams, dist: DiscreteDistribution) -> float:
    """Bound on the change in the search objective per unit grid step."""
    spread = float(dist.support[-1] - dist.support[0])
    t = params.tau
    edge = min(t, 1.0 - t)
    if edge <= 0.0 or params.width == 0.0:
        return 0.0
    return params.width * spread * (3.0 + 1.0 / edge)


def enumerate_emsm_bound(
    instance: DiscreteInstance, grid_resolution: int = 50, side: str = "upper"
) -> OracleResult:
    """Extreme of ``E(Y^1 | T=0)`` over binary-confounder constructions on a grid.

    Grid axes are ``c = Q(U=1 | T=1)``, the mixing weight ``s`` between the
    lowest-``c`` and highest-``c`` slices of the treated law (which fixes the
    confounder-specific mean ``eta(1)``), and the odds multiplier ``lambda(1)``.
    ``lambda(0)`` and ``eta(0)`` follow from the normalisation and the
    inherent-mean constraint; candidates breaking any range constraint are
    discarded.
    """
    if grid_resolution < 50:
        raise ValueError("grid_resolution must be at least 50")
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")
    params, dist = instance.params, instance.treated
    lam_lo, lam_hi = params.lambda1, params.lambda2
    d1, d2 = instance_deltas(params, dist)
    m = dist.mean
    res = grid_resolution

    c = (np.arange(1, res) / res)[:, None, None]
    s = (np.arange(res + 1) / res)[None, :, None]
    lam1 = (lam_lo + (lam_hi - lam_lo) * np.arange(res + 1) / res)[None, None, :]

    low, high = _tail_means(dist, c[:, 0, 0])
    eta1 = (1.0 - s) * low[:, None, None] + s * high[:, None, None]
    eta0 = (m - c * eta1) / (1.0 - c)
    lam0 = (1.0 - c * lam1) / (1.0 - c)

    ok = (lam0 >= lam_lo - _FEAS_TOL) & (lam0 <= lam_hi + _FEAS_TOL)
    for eta in (eta1, eta0):
        ok = ok & (eta - m <= d2 + _FEAS_TOL) & (m - eta <= d1 + _FEAS_TOL)
    objective = c * lam1 * eta1 + (1.0 - c) * lam0 * eta0
    objective = np.broadcast_to(objective, ok.shape)

    # The trivial confounder (U independent of everything) is always feasible.
    best, arg = m, None
    if np.any(ok):
        masked = np.where(ok, objective, -np.inf if side == "upper" else np.inf)
        flat = int(np.argmax(masked) if side == "upper" else np.argmin(masked))
        cand = float(masked.flat[flat])
        if (side == "upper" and cand > best) or (side == "lower" and cand < best):
            best, arg = cand, np.unravel_index(flat, ok.shape)

    lip = emsm_lipschitz(params, dist)
    if arg is None:
        return OracleResult(best, 0.5, (m, m), (1.0, 1.0), 2.0 / res * lip, lip, int(ok.sum()))
    i, j, k = arg
    e1 = float(eta1[i, j, 0])
    cc = float(c[i, 0, 0])
    l1 = float(lam1[0, 0, k])
    return OracleResult(
        best,
        cc,
        (float(eta0[i, j, 0]), e1),
        (float(lam0[i, 0, k]), l1),
        2.0 / res * lip,
        lip,
        int(ok.sum()),
    )


@dataclass(frozen=True)
class ConstructionCheck:
    value: float
    violations: tuple[str, ...]

    @property
    def feasible(self) -> bool:
        return not self.violations


def check_construction(
    construction: WorstCaseConstruction,
    dist: DiscreteDistribution,
    params: SensitivityParams,
    *,
    prob_tol: float = 1e-12,
    mean_tol: float = 1e-10,
) -> ConstructionCheck:
    """Evaluate a binary-confounder construction and list violated constraints."""
    bad: list[str] = []
    c = construction.u_prob_t1
    q_u = np.array([1.0 - c, c])
    lam = np.array(construction.lambda_of_u, dtype=float)
    laws = [np.asarray(law, dtype=float) for law in construction.laws]
    y = np.asarray(construction.support, dtype=float)
    # Align the construction's support with the observed law.
    obs = np.array([dist.probs[dist.support == v].sum() for v in y])
    for u, law in enumerate(laws):
        if np.any(law < -prob_tol):
            bad.append(f"negative mass under U={u}")
        if abs(law.sum() - 1.0) > prob_tol:
            bad.append(f"law under U={u} sums to {law.sum()!r}")
    if np.max(np.abs(q_u[0] * laws[0] + q_u[1] * laws[1] - obs)) > prob_tol:
        bad.append("mixture does not reproduce the observed treated law")
    if np.any(lam < params.lambda1 - prob_tol) or np.any(lam > params.lambda2 + prob_tol):
        bad.append("odds multiplier outside [lambda1, lambda2]")
    if abs(lam @ q_u - 1.0) > prob_tol:
        bad.append("odds multipliers do not average to one")
    eta = np.array([y @ laws[0], y @ laws[1]])
    m = dist.mean
    if abs(eta @ q_u - m) > mean_tol:
        bad.append("confounder means do not average to the treated mean")
    d1, d2 = instance_deltas(params, dist)
    for u in (0, 1):
        if q_u[u] > 0 and not (-d1 - mean_tol <= eta[u] - m <= d2 + mean_tol):
            bad.append(f"eta({u}) outside the outcome deviation range")
    value = float(eta @ (lam * q_u))
    return ConstructionCheck(value, tuple(bad))


@dataclass(frozen=True)
class DvOracleResult:
    upper: float
    lower: float
    argmax: tuple[float, float]
    argmin: tuple[float, float]
    slack: float


def risk_ratio(p1: float, x, y):
    """``min(p1 + y, 1) / max(p1 - x, 0)`` with 0/0 read as 1 and c/0 as inf."""
    num = np.minimum(p1 + np.asarray(y, dtype=float), 1.0)
    den = np.maximum(p1 - np.asarray(x, dtype=float), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 1.0))
    return out


def enumerate_dv_bound(
    p1: float,
    prob_t0: float,
    lambda1: float,
    lambda2: float,
    theta: float,
    grid_resolution: int = 200,
) -> DvOracleResult:
    """Extremes of the binary-outcome bound over deviation pairs with risk ratio <= theta."""
    res = grid_resolution
    t = 0.5 if lambda1 == lambda2 else (lambda2 - 1.0) / (lambda2 - lambda1)
    x = np.linspace(0.0, p1, res + 1)[:, None]
    y = np.linspace(0.0, 1.0 - p1, res + 1)[None, :]
    feasible = risk_ratio(p1, x, y) <= theta * (1 + _FEAS_TOL)
    # Exhaustive optimised losses for Bernoulli(p1).
    bern = DiscreteDistribution([0.0, 1.0], [1.0 - p1, p1]) if 0 < p1 < 1 else None
    up_loss = exhaustive_loss(bern, t) if bern else 0.0
    lo_loss = exhaustive_loss(bern, 1.0 - t) if bern else 0.0
    scale = prob_t0 * (lambda2 - lambda1)
    up = p1 + scale * np.minimum(np.minimum(t * x, (1 - t) * y), up_loss)
    lo = p1 - scale * np.minimum(np.minimum((1 - t) * x, t * y), lo_loss)
    up = np.where(feasible, up, -np.inf)
    lo = np.where(feasible, lo, np.inf)
    iu = np.unravel_index(int(np.argmax(up)), up.shape)
    il = np.unravel_index(int(np.argmin(lo)), lo.shape)
    lip = scale * max(p1, 1.0 - p1)
    return DvOracleResult(
        float(up[iu]),
        float(lo[il]),
        (float(x[iu[0], 0]), float(y[0, iu[1]])),
        (float(x[il[0], 0]), float(y[0, il[1]])),
        2.0 / res * lip,
    )


@dataclass(frozen=True)
class DualityScan:
    min_value: float
    argmin: tuple[float, ...]
    q_star: float
    q_star_in_argmin: bool
    slack: float


def duality_scan(
    dist: DiscreteDistribution,
    params: SensitivityParams,
    q_grid=None,
    *,
    tie_tol: float = 1e-12,
) -> DualityScan:
    """Minimise the relaxed upper bound over a threshold grid.

    The default grid is 201 evenly spaced points across the support plus the
    support points themselves.
    """
    lo, hi = float(dist.support[0]), float(dist.support[-1])
    if q_grid is None:
        q_grid = np.union1d(np.linspace(lo, hi, 201), dist.support)
    q_grid = np.sort(np.asarray(q_grid, dtype=float))
    values = np.array([dual_bound_at_q(params, float(q), dist) for q in q_grid])
    vmin = float(values.min())
    tol = tie_tol * max(1.0, abs(vmin))
    argmin = tuple(float(q) for q in q_grid[values <= vmin + tol])
    # Left quantile located by direct cumulative search, not by the library routine.
    cum = np.cumsum(dist.probs)
    q_star = float(dist.support[np.flatnonzero(cum >= params.tau - 1e-12)[0]])
    step = float(np.max(np.diff(q_grid))) if q_grid.size > 1 else 0.0
    slack = params.width * max(params.tau, 1.0 - params.tau) * step
    return DualityScan(vmin, argmin, q_star, any(abs(q - q_star) <= 1e-12 for q in argmin), slack)


def random_discrete_distribution(rng: np.random.Generator, max_support: int = 10) -> DiscreteDistribution:
    """Mixed atom / grid family used by property tests.

    Support sizes run from 1 to ``max_support``; values are either integers on
    a short grid (producing ties with quantile levels) or continuous draws.
    """
    k = int(rng.integers(1, max_support + 1))
    if rng.random() < 0.5:
        values = rng.choice(np.arange(-5, 6), size=k, replace=False).astype(float)
    else:
        values = rng.normal(size=k) * rng.uniform(0.5, 3.0)
    raw = rng.dirichlet(np.full(k, rng.uniform(0.3, 3.0)))
    if rng.random() < 0.3:
        raw = np.round(raw * 10) + 1.0
        raw = raw / raw.sum()
    return DiscreteDistribution(values, raw / raw.sum())
