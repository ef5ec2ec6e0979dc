"""Sample bounds for binary outcomes under the risk-ratio sensitivity model.

Outcome probabilities in each arm and the propensity are fitted by
maximum-likelihood logistic regression; the conditional bounds are averaged
over the sample, and a pairs bootstrap gives percentile intervals.  All
bootstrap replicates are fitted together: each replicate is a vector of
resampling counts, and Newton's method runs on the whole batch at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dataset import Dataset
from .dr_estimate import normal_quantile
from .dv_family import DvParams, bounding_factor
from .model_fit import Design, DesignSpec, build_design

ESTIMANDS = ("mu1", "mu0", "ate", "crr")


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed to fit."""


# ---------------------------------------------------------------------------
# Maximum-likelihood logistic regression, batched over weight vectors
# ---------------------------------------------------------------------------


SATURATED_ETA = 20.0


def fit_logistic_ml(
    F: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None, *, tol: float = 1e-10, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted logistic MLE for each row of ``weights``.

    ``weights`` has shape ``(n,)`` or ``(B, n)``.  Returns coefficients of
    shape ``(B, p)`` and a boolean mask of converged fits; fits that separate
    the data or whose information matrix is singular are flagged as failed.
    """
    F = np.asarray(F, float)
    y = np.asarray(y, float)
    W = np.ones((1, y.size)) if weights is None else np.atleast_2d(np.asarray(weights, float))
    B, p = W.shape[0], F.shape[1]
    coef = np.zeros((B, p))
    ok = np.ones(B, dtype=bool)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_iter):
        act = ~done & ok
        if not np.any(act):
            break
        eta = coef[act] @ F.T
        mu = expit(eta)
        Wa = W[act]
        grad = (Wa * (y - mu)) @ F
        info = np.einsum("bn,ni,nj->bij", Wa * mu * (1.0 - mu), F, F)
        # Singular information (e.g. an arm missing from the resample) fails the fit.
        cond = np.linalg.cond(info)
        bad = ~np.isfinite(cond) | (cond > 1e12)
        step = np.zeros_like(grad)
        good = ~bad
        if np.any(good):
            step[good] = np.linalg.solve(info[good], grad[good][..., None])[..., 0]
        idx = np.flatnonzero(act)
        ok[idx[bad]] = False
        coef[idx] += step
        wsum = Wa.sum(axis=1)
        conv = np.max(np.abs(grad), axis=1) / np.maximum(wsum, 1.0) <= tol
        done[idx[conv & good]] = True
        ok[idx[np.max(np.abs(coef[idx] @ F.T), axis=1) > 30.0]] = False
    ok &= done
    # A converged fit can still sit on a separating direction: the score
    # underflows before the coefficients diverge.  No finite-sample MLE puts a
    # weighted unit's fitted risk within 1e-9 of 0 or 1 without separation.
    eta_abs = np.abs(coef @ F.T)
    ok &= ~np.any((W > 0) & (eta_abs > SATURATED_ETA), axis=1)
    return coef, ok


@dataclass(frozen=True)
class DvPluginModels:
    """Fitted ``p1(x)``, ``p0(x)`` and ``pi(x)`` evaluated at every sample unit."""

    p1: np.ndarray
    p0: np.ndarray
    pi: np.ndarray
    coef_p1: np.ndarray
    coef_p0: np.ndarray
    coef_pi: np.ndarray


def _clip(p):
    return np.clip(p, 1e-6, 1.0 - 1e-6)


def fit_dv_models(data: Dataset, design: Design | None = None, spec: DesignSpec = DesignSpec()) -> DvPluginModels:
    if not data.binary_outcome:
        raise ValueError("the risk-ratio method needs a binary outcome")
    design = design or build_design(data.x, spec, data.names)
    F = design.matrix
    t = data.t
    c1, ok1 = fit_logistic_ml(F, data.y, t)
    c0, ok0 = fit_logistic_ml(F, data.y, 1.0 - t)
    cp, okp = fit_logistic_ml(F, t)
    if not (ok1[0] and ok0[0] and okp[0]):
        raise RuntimeError("a plug-in logistic model failed to converge (separation or collinearity)")
    return DvPluginModels(
        _clip(expit(F @ c1[0])), _clip(expit(F @ c0[0])), _clip(expit(F @ cp[0])), c1[0], c0[0], cp[0]
    )


# ---------------------------------------------------------------------------
# Unconditional bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DvPointBounds:
    estimand: str
    lower: float
    upper: float


def _bound_terms(p1, p0, pi, params: DvParams, counts=None):
    """Sample averages of the four arm-bound integrands.

    ``counts`` (shape ``(B, n)``) turns them into count-weighted averages.
    """
    with np.errstate(invalid="ignore"):
        rows = np.stack(list(_per_unit_terms(p1, p0, pi, params)))
        if counts is None:
            return rows.mean(axis=-1)
        counts = np.atleast_2d(counts)
        return (counts @ rows.T / counts.sum(axis=1, keepdims=True)).T


def _assemble(terms) -> dict[str, tuple]:
    m1l, m1u, m0l, m0u = terms
    with np.errstate(divide="ignore", invalid="ignore"):
        crr_l = np.where(m0u > 0, m1l / m0u, np.inf)
        crr_u = np.where(m0l > 0, m1u / m0l, np.inf)
    return {
        "mu1": (m1l, m1u),
        "mu0": (m0l, m0u),
        "ate": (m1l - m0u, m1u - m0l),
        "crr": (crr_l, crr_u),
    }


def dv_unconditional_bounds(models: DvPluginModels, params: DvParams) -> dict[str, DvPointBounds]:
    """Bounds on ``E(Y^1)``, ``E(Y^0)``, their difference and their ratio."""
    parts = _assemble(_bound_terms(models.p1, models.p0, models.pi, params))
    return {k: DvPointBounds(k, float(lo), float(up)) for k, (lo, up) in parts.items()}


def dv_population_bounds(p1, p0, pi, weights, params: DvParams) -> dict[str, DvPointBounds]:
    """The same bounds for a finite-support covariate law with stratum ``weights``."""
    w = np.asarray(weights, float)
    parts = _assemble(_bound_terms(np.asarray(p1, float), np.asarray(p0, float), np.asarray(pi, float),
                                   params, counts=w[None, :]))
    return {k: DvPointBounds(k, float(lo[0]), float(up[0])) for k, (lo, up) in parts.items()}


def dv_conditional_variance(p1, p0, pi, s1, s0, s, params: DvParams) -> tuple[float, float]:
    """Delta-method variances of the single-stratum conditional ATE bounds.

    ``s1``, ``s0`` and ``s`` are standard errors of ``p1``, ``p0`` and ``pi``.
    Diagnostic only; interval estimates use the bootstrap.
    """
    b_lo = bounding_factor(params.inv_lambda1, params.theta)
    b_up = bounding_factor(params.lambda2, params.theta)
    var_lo = (s1**2 + s0**2 * b_lo**2) * (pi + (1 - pi) / b_lo) ** 2 + (p1 - p0 * b_lo) ** 2 * (
        1 - 1 / b_lo
    ) ** 2 * s**2
    var_up = (s1**2 * b_up**2 + s0**2) * (1 - pi + pi / b_up) ** 2 + (p1 * b_up - p0) ** 2 * (
        1 - 1 / b_up
    ) ** 2 * s**2
    return float(var_lo), float(var_up)


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 1000
    seed: int = 0
    level: float = 0.9
    max_failure_rate: float = 0.05

    def __post_init__(self) -> None:
        if self.replicates < 2:
            raise ValueError("replicates must be >= 2")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")


@dataclass(frozen=True)
class DvInterval:
    estimand: str
    theta: float
    lambda1: float
    lambda2: float
    point_lower: float
    point_upper: float
    ci_lower: float
    ci_upper: float
    se_lower: float
    se_upper: float
    replicates: int
    failures: int


def replicate_counts(n: int, seed: int, replicates: int) -> np.ndarray:
    """Resampling counts; replicate ``r`` depends only on ``(seed, r)``."""
    counts = np.empty((replicates, n))
    for r in range(replicates):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, r])))
        counts[r] = np.bincount(gen.integers(0, n, size=n), minlength=n)
    return counts


def dv_bootstrap_ci(
    data: Dataset,
    params_list: list[DvParams],
    config: BootstrapConfig = BootstrapConfig(),
    *,
    design: Design | None = None,
    spec: DesignSpec = DesignSpec(),
) -> list[DvInterval]:
    """Percentile intervals for every estimand and every parameter setting.

    The interval runs from the ``(1 - level)/2`` quantile of the bootstrap
    lower bounds to the ``(1 + level)/2`` quantile of the bootstrap upper
    bounds.  Standard errors are backed out by matching each endpoint to a
    normal interval around the point bound.
    """
    design = design or build_design(data.x, spec, data.names)
    models = fit_dv_models(data, design)
    F, t, y = design.matrix, data.t, data.y
    W = replicate_counts(data.n, config.seed, config.replicates)
    c1, ok1 = fit_logistic_ml(F, y, W * t)
    c0, ok0 = fit_logistic_ml(F, y, W * (1.0 - t))
    cp, okp = fit_logistic_ml(F, t, W)
    ok = ok1 & ok0 & okp
    failures = int((~ok).sum())
    if failures > config.max_failure_rate * config.replicates:
        raise BootstrapError(f"{failures} of {config.replicates} bootstrap replicates failed to fit")
    W, c1, c0, cp = W[ok], c1[ok], c0[ok], cp[ok]
    P1 = _clip(expit(c1 @ F.T))
    P0 = _clip(expit(c0 @ F.T))
    PI = _clip(expit(cp @ F.T))
    lo_q, hi_q = (1.0 - config.level) / 2.0, (1.0 + config.level) / 2.0
    z = normal_quantile(lo_q)
    out = []
    for params in params_list:
        point = dv_unconditional_bounds(models, params)
        with np.errstate(invalid="ignore"):
            terms = np.stack([
                np.einsum("bn,bn->b", W, v) / W.sum(axis=1)
                for v in _per_unit_terms(P1, P0, PI, params)
            ])
        boot = _assemble(terms)
        for est in ESTIMANDS:
            lo_b, up_b = np.sort(boot[est][0]), np.sort(boot[est][1])
            ci_lo = float(np.quantile(lo_b, lo_q))
            ci_up = float(np.quantile(up_b, hi_q))
            pl, pu = point[est].lower, point[est].upper
            out.append(DvInterval(
                est, params.theta, params.lambda1, params.lambda2, pl, pu, ci_lo, ci_up,
                (pl - ci_lo) / z, (ci_up - pu) / z, int(ok.sum()), failures,
            ))
    return out


def _per_unit_terms(P1, P0, PI, params: DvParams):
    """Integrands of the lower and upper bounds on ``E(Y^1)`` and ``E(Y^0)``."""
    b_up = bounding_factor(params.lambda2, params.theta)
    b_lo = bounding_factor(params.inv_lambda1, params.theta)
    inv_lo = 0.0 if math.isinf(b_lo) else 1.0 / b_lo
    yield P1 * (PI + (1.0 - PI) * inv_lo)
    yield P1 * (PI + (1.0 - PI) * b_up)
    yield P0 * (PI / b_up + 1.0 - PI)
    yield P0 * (PI * b_lo + 1.0 - PI)
