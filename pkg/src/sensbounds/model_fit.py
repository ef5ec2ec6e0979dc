"""Working-model fitting for calibrated bound estimation.

Three convex fits are chained per arm: a calibration-loss logistic
propensity model, a weighted quantile regression and a weighted mean
regression on the linear or logistic scale.  Each also has a Lasso-penalised variant solved by accelerated
proximal gradient with the intercept left unpenalised, tuned by K-fold
cross-validation over a geometric penalty grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, special

logger = logging.getLogger(__name__)

PI_CLIP = 1e-6


class FitError(RuntimeError):
    """A working model could not be fitted."""


class SeparationError(FitError):
    """The calibration loss is unbounded below (perfect separation)."""


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignSpec:
    interactions: bool = False
    standardize: bool = True
    min_count: int = 0

    def __post_init__(self) -> None:
        if self.min_count < 0:
            raise ValueError("min_count must be nonnegative")


@dataclass
class Design:
    """Intercept-first design matrix with the recipe needed to rebuild it."""

    matrix: np.ndarray
    names: list[str]
    terms: list[tuple[int, ...]]
    means: np.ndarray
    scales: np.ndarray
    dropped: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def transform(self, raw: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        cols = [np.prod(raw[:, list(term)], axis=1) for term in self.terms]
        body = np.column_stack(cols) if cols else np.empty((raw.shape[0], 0))
        body = (body - self.means) / self.scales
        return np.column_stack([np.ones(raw.shape[0]), body])

    def unstandardize(self, coef: np.ndarray) -> np.ndarray:
        """Coefficients on the raw (unscaled) columns."""
        slopes = coef[1:] / self.scales
        return np.concatenate([[coef[0] - slopes @ self.means], slopes])


def build_design(
    data, spec: DesignSpec = DesignSpec(), names: Sequence[str] | None = None
) -> Design:
    """Intercept plus main effects (and optionally pairwise products).

    Product columns with fewer than ``spec.min_count`` nonzero entries are
    dropped, then constant columns are dropped with a warning record.
    """
    if hasattr(data, "columns") and names is None:
        names = [str(c) for c in data.columns]
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, k = x.shape
    if n == 0:
        raise ValueError("design has zero rows")
    if not np.all(np.isfinite(x)):
        raise ValueError("covariates contain missing or non-finite values")
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(k)]
    if len(names) != k:
        raise ValueError("names length does not match the number of columns")

    terms: list[tuple[int, ...]] = [(j,) for j in range(k)]
    labels = list(names)
    cols = [x[:, j] for j in range(k)]
    dropped: list[str] = []
    if spec.interactions:
        for i, j in combinations(range(k), 2):
            prod = x[:, i] * x[:, j]
            label = f"{names[i]}:{names[j]}"
            if np.count_nonzero(prod) < spec.min_count:
                dropped.append(label)
                continue
            terms.append((i, j))
            labels.append(label)
            cols.append(prod)

    warn: list[str] = []
    keep = []
    for idx, col in enumerate(cols):
        if np.ptp(col) == 0.0:
            msg = f"dropped constant column {labels[idx]!r}"
            warn.append(msg)
            dropped.append(labels[idx])
            logger.warning(msg)
        else:
            keep.append(idx)
    body = np.column_stack([cols[i] for i in keep]) if keep else np.empty((n, 0))
    if spec.standardize and keep:
        means = body.mean(axis=0)
        scales = body.std(axis=0)
    else:
        means = np.zeros(len(keep))
        scales = np.ones(len(keep))
    matrix = np.column_stack([np.ones(n), (body - means) / scales])
    return Design(
        matrix=matrix,
        names=["(intercept)"] + [labels[i] for i in keep],
        terms=[terms[i] for i in keep],
        means=means,
        scales=scales,
        dropped=dropped,
        warnings=warn,
    )


def _as_matrix(design) -> np.ndarray:
    return design.matrix if isinstance(design, Design) else np.asarray(design, dtype=float)


def _names(design, p: int) -> list[str]:
    return design.names if isinstance(design, Design) else [f"col{j}" for j in range(p)]


# ---------------------------------------------------------------------------
# Fit results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    """Coefficients plus convergence diagnostics.

    ``residual`` is the optimality measure appropriate to the fit: gradient
    max-norm, subgradient residual or Lasso KKT residual.
    """

    kind: str
    coef: np.ndarray
    objective: float
    iterations: int
    residual: float
    tolerance: float
    penalty: float = 0.0
    link_range: tuple[float, float] | None = None

    @property
    def converged(self) -> bool:
        return self.residual <= self.tolerance


def clip_propensity(pi: np.ndarray) -> np.ndarray:
    return np.clip(pi, PI_CLIP, 1.0 - PI_CLIP)


def propensity(design, coef: np.ndarray) -> np.ndarray:
    """Clipped ``expit(f' gamma)``."""
    eta = _as_matrix(design) @ coef
    return clip_propensity(0.5 * (1.0 + np.tanh(0.5 * eta)))


# ---------------------------------------------------------------------------
# Losses (shared by the unpenalised and penalised solvers)
# ---------------------------------------------------------------------------


class _CalLogistic:
    """Calibration loss: arm 1 ``T e^{-f'g} + (1-T) f'g``; arm 0 ``(1-T) e^{f'g} - T f'g``."""

    kind = "cal_logistic"

    def __init__(self, F: np.ndarray, t: np.ndarray, arm: int):
        if arm not in (0, 1):
            raise ValueError("target_arm must be 0 or 1")
        self.F = F
        self.sign = 1.0 if arm == 1 else -1.0
        self.s = t.astype(float) if arm == 1 else 1.0 - t.astype(float)

    def _parts(self, coef, rows):
        F = self.F if rows is None else self.F[rows]
        s = self.s if rows is None else self.s[rows]
        eta = self.sign * (F @ coef)
        return F, s, eta

    def loss(self, coef, rows=None) -> float:
        F, s, eta = self._parts(coef, rows)
        with np.errstate(over="ignore"):
            return float(np.mean(s * np.exp(-eta) + (1.0 - s) * eta))

    def grad(self, coef, rows=None) -> np.ndarray:
        F, s, eta = self._parts(coef, rows)
        with np.errstate(over="ignore"):
            return self.sign * (F.T @ (-s * np.exp(-eta) + (1.0 - s))) / F.shape[0]

    def hess(self, coef, rows=None) -> np.ndarray:
        F, s, eta = self._parts(coef, rows)
        with np.errstate(over="ignore"):
            d = s * np.exp(-eta)
        return (F.T * d) @ F / F.shape[0]

    def null(self, rows=None) -> np.ndarray:
        s = self.s if rows is None else self.s[rows]
        n1, n0 = s.sum(), (1.0 - s).sum()
        if n1 == 0 or n0 == 0:
            raise FitError("both treatment arms must be nonempty")
        coef = np.zeros(self.F.shape[1])
        coef[0] = self.sign * np.log(n1 / n0)
        return coef

    validation_loss = loss


def _smooth_check(r: np.ndarray, tau: float, eps: float):
    """Check loss with the kink replaced by a quadratic on ``|r| <= eps``.

    Returns (value, derivative in r, second derivative in r).
    """
    a = np.abs(r)
    inside = a <= eps
    hub = np.where(inside, r * r / (2 * eps) + eps / 2, a)
    dhub = np.where(inside, r / eps, np.sign(r))
    val = (tau - 0.5) * r + 0.5 * hub
    der = (tau - 0.5) + 0.5 * dhub
    sec = np.where(inside, 0.5 / eps, 0.0)
    return val, der, sec


def check_loss_values(r: np.ndarray, tau: float) -> np.ndarray:
    return np.where(r >= 0, tau * r, (tau - 1.0) * r)


class _WeightedQuantile:
    """Weighted (optionally smoothed) check loss ``mean{w rho_tau(y - h'b)}``."""

    kind = "weighted_quantile"

    def __init__(self, H, y, w, tau, eps):
        self.H, self.y, self.w, self.tau, self.eps = H, y, w, tau, eps

    def _parts(self, coef, rows):
        if rows is None:
            return self.H, self.y, self.w
        return self.H[rows], self.y[rows], self.w[rows]

    def loss(self, coef, rows=None) -> float:
        H, y, w = self._parts(coef, rows)
        val, _, _ = _smooth_check(y - H @ coef, self.tau, self.eps)
        return float(np.mean(w * val))

    def grad(self, coef, rows=None) -> np.ndarray:
        H, y, w = self._parts(coef, rows)
        _, der, _ = _smooth_check(y - H @ coef, self.tau, self.eps)
        return -(H.T @ (w * der)) / H.shape[0]

    def hess(self, coef, rows=None) -> np.ndarray:
        H, y, w = self._parts(coef, rows)
        _, _, sec = _smooth_check(y - H @ coef, self.tau, self.eps)
        return (H.T * (w * sec)) @ H / H.shape[0]

    def validation_loss(self, coef, rows=None) -> float:
        H, y, w = self._parts(coef, rows)
        return float(np.mean(w * check_loss_values(y - H @ coef, self.tau)))

    def null(self, rows=None) -> np.ndarray:
        H, y, w = self._parts(None, rows)
        n = H.shape[0]
        # The intercept derivative is monotone; bisect it to machine precision.
        def deriv(b):
            _, der, _ = _smooth_check(y - b, self.tau, self.eps)
            return -np.sum(w * der) / n
        lo, hi = y.min() - 2 * self.eps, y.max() + 2 * self.eps
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if deriv(mid) > 0:
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-15 * max(1.0, abs(mid)):
                break
        coef = np.zeros(H.shape[1])
        coef[0] = 0.5 * (lo + hi)
        return coef


class _WeightedLs:
    kind = "weighted_ls"

    def __init__(self, F, z, w):
        self.F, self.z, self.w = F, z, w

    def _parts(self, rows):
        if rows is None:
            return self.F, self.z, self.w
        return self.F[rows], self.z[rows], self.w[rows]

    def loss(self, coef, rows=None) -> float:
        F, z, w = self._parts(rows)
        r = z - F @ coef
        return float(np.mean(w * r * r))

    def grad(self, coef, rows=None) -> np.ndarray:
        F, z, w = self._parts(rows)
        return -2.0 * (F.T @ (w * (z - F @ coef))) / F.shape[0]

    def hess(self, coef, rows=None) -> np.ndarray:
        F, _, w = self._parts(rows)
        return 2.0 * (F.T * w) @ F / F.shape[0]

    def null(self, rows=None) -> np.ndarray:
        F, z, w = self._parts(rows)
        if w.sum() <= 0:
            raise FitError("all weights are zero")
        coef = np.zeros(F.shape[1])
        coef[0] = float(w @ z / w.sum())
        return coef

    validation_loss = loss


class _WeightedLogisticMean:
    """Quasi-binomial loss ``mean{w [log(1 + e^eta) - s eta]}`` for ``s`` in [0, 1].

    ``s`` is the response rescaled to the unit interval; the stationarity
    condition ``mean{w (s - expit(eta)) f} = 0`` carries over to the original
    scale, which is what the augmentation term needs.
    """

    kind = "weighted_logistic"

    def __init__(self, F, s, w):
        self.F, self.s, self.w = F, s, w

    def _parts(self, rows):
        if rows is None:
            return self.F, self.s, self.w
        return self.F[rows], self.s[rows], self.w[rows]

    def loss(self, coef, rows=None) -> float:
        F, s, w = self._parts(rows)
        eta = F @ coef
        return float(np.mean(w * (np.logaddexp(0.0, eta) - s * eta)))

    def grad(self, coef, rows=None) -> np.ndarray:
        F, s, w = self._parts(rows)
        return F.T @ (w * (special.expit(F @ coef) - s)) / F.shape[0]

    def hess(self, coef, rows=None) -> np.ndarray:
        F, _, w = self._parts(rows)
        mu = special.expit(F @ coef)
        return (F.T * (w * mu * (1.0 - mu))) @ F / F.shape[0]

    def null(self, rows=None) -> np.ndarray:
        F, s, w = self._parts(rows)
        if w.sum() <= 0:
            raise FitError("all weights are zero")
        mean = float(np.clip(w @ s / w.sum(), 1e-12, 1.0 - 1e-12))
        coef = np.zeros(F.shape[1])
        coef[0] = special.logit(mean)
        return coef

    validation_loss = loss


def unit_range(z: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Smallest and largest response among rows with positive weight."""
    act = np.asarray(z, float)[np.asarray(w) > 0]
    return float(act.min()), float(act.max())


def logistic_mean_values(design, coef: np.ndarray, link_range: tuple[float, float]) -> np.ndarray:
    """``lo + (hi - lo) expit(f' alpha)``."""
    lo, hi = link_range
    return lo + (hi - lo) * special.expit(_as_matrix(design) @ coef)


# ---------------------------------------------------------------------------
# Unpenalised fits
# ---------------------------------------------------------------------------


def _newton(problem, coef, tol, max_iter, *, rows=None, divergence=None):
    """Damped Newton with Armijo backtracking.  Returns (coef, iterations, grad max-norm).

    The ridge added to the Hessian grows after damped steps and shrinks after
    full steps, which keeps nearly singular piecewise-quadratic problems moving.
    """
    f = problem.loss(coef, rows)
    g = problem.grad(coef, rows)
    it = 0
    rel_ridge = 1e-12
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= tol:
            return coef, it - 1, gnorm
        H = problem.hess(coef, rows)
        h_scale = float(np.trace(H)) / H.shape[0]
        ridge = rel_ridge * (h_scale if h_scale > 0 else 1.0)
        try:
            step = linalg.solve(H + ridge * np.eye(H.shape[0]), g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = g
        if not np.all(np.isfinite(step)):
            step = g
        slope = float(g @ step)
        if slope <= 0:
            step, slope = g, float(g @ g)
        a = 1.0
        while True:
            trial = coef - a * step
            ft = problem.loss(trial, rows)
            if np.isfinite(ft) and ft <= f - 1e-4 * a * slope:
                break
            a *= 0.5
            if a < 1e-10:
                break
        if a < 1e-10:
            # Backtracking failed: fall back towards a short gradient step.
            rel_ridge *= 1e4
            if rel_ridge > 1e12:
                return coef, it, gnorm
            continue
        if a == 1.0:
            rel_ridge = max(rel_ridge / 10.0, 1e-12)
        else:
            rel_ridge = min(rel_ridge * (100.0 if a < 0.1 else 10.0), 1e6)
        coef, f = trial, ft
        if divergence is not None:
            divergence(coef)
        g = problem.grad(coef, rows)
    return coef, max_iter, float(np.max(np.abs(g)))


def fit_cal_logistic(
    design, treatment, target_arm: int = 1, *, tol: float = 1e-9, max_iter: int = 200
) -> FitResult:
    """Minimise the calibration loss for the propensity model.

    At the optimum the inverse-propensity weights of the target arm balance
    every design column against the full sample.
    """
    F = _as_matrix(design)
    t = np.asarray(treatment, dtype=float)
    if F.shape[0] != t.size:
        raise ValueError("design and treatment lengths differ")
    prob = _CalLogistic(F, t, target_arm)
    names = _names(design, F.shape[1])

    def divergence(coef):
        eta = np.abs(F @ coef)
        if np.max(eta) > 40.0:
            worst = np.argsort(-np.abs(coef[1:]))[:3] + 1
            cols = ", ".join(names[j] for j in worst)
            raise SeparationError(f"calibration loss diverges (separation); largest coefficients on {cols}")

    coef, it, gnorm = _newton(prob, prob.null(), tol, max_iter, divergence=divergence)
    if gnorm > tol:
        raise FitError(f"calibration fit did not converge: gradient {gnorm:.3g} after {it} iterations")
    return FitResult("cal_logistic", coef, prob.loss(coef), it, gnorm, tol)


def calibration_residual(design, treatment, coef, target_arm: int = 1) -> np.ndarray:
    """``mean{T e^{-f'g} f} - mean{(1-T) f}`` for arm 1 (mirrored for arm 0)."""
    F = _as_matrix(design)
    t = np.asarray(treatment, dtype=float)
    eta = F @ coef
    if target_arm == 1:
        return (F.T @ (t * np.exp(-eta)) - F.T @ (1 - t)) / t.size
    return (F.T @ ((1 - t) * np.exp(eta)) - F.T @ t) / t.size


def subgradient_residual(H, y, w, tau, coef, *, zero_tol: float | None = None) -> float:
    """Distance of zero from the subdifferential of ``mean{w rho_tau(y - h'b)}``.

    Residuals within ``zero_tol`` of zero may take any subgradient weight in
    ``[tau - 1, tau]``; the best choice is found by bounded least squares.
    """
    H = np.asarray(H, dtype=float)
    r = y - H @ coef
    if zero_tol is None:
        zero_tol = 1e-9 * max(1.0, float(np.max(np.abs(y))))
    on = (np.abs(r) <= zero_tol) & (w > 0)
    off = ~on & (w > 0)
    n = y.size
    fixed = -(H[off].T @ (w[off] * np.where(r[off] > 0, tau, tau - 1.0))) / n
    if not np.any(on):
        return float(np.max(np.abs(fixed)))
    A = -(H[on].T * w[on]) / n
    sol = optimize.lsq_linear(A, -fixed, bounds=(tau - 1.0, tau), method="bvls", tol=1e-14)
    return float(np.max(np.abs(A @ sol.x + fixed)))


def _vertex_candidates(H, y, r, p):
    """Interpolating solutions through ``p`` near-zero-residual rows."""
    order = np.argsort(np.abs(r), kind="stable")
    for width in (p, 2 * p, 4 * p, H.shape[0]):
        idx = order[: min(width, H.shape[0])]
        _, _, piv = linalg.qr(H[idx].T, pivoting=True, mode="economic")
        basis = idx[piv[:p]]
        B = H[basis]
        if np.linalg.matrix_rank(B) == p:
            yield np.linalg.solve(B, y[basis])
            return


def fit_weighted_quantile(
    design_h, y, weights, tau_level: float, *, tol: float = 1e-8
) -> FitResult:
    """Minimise ``mean{w rho_tau(y - h'b)}``.

    A smoothed loss is minimised by Newton's method for a decreasing
    schedule of smoothing widths, then the best interpolating vertex through
    the smallest residuals is tried.  The reported residual certifies the
    result through the subgradient optimality condition.
    """
    H = _as_matrix(design_h)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    act = w > 0
    if not np.any(act):
        raise ValueError("all weights are zero")
    n, p = H.shape
    Ha, ya, wa = H[act], y[act], w[act]
    scale = float(np.std(ya)) or max(1.0, float(np.max(np.abs(ya))))

    def exact(coef):
        return float(np.sum(wa * check_loss_values(ya - Ha @ coef, tau_level)) / n)

    sw = np.sqrt(wa)
    coef = np.linalg.lstsq(Ha * sw[:, None], ya * sw, rcond=None)[0]
    iters = 0
    best, best_val = coef, exact(coef)
    wsum = float(w.sum()) / n
    resid = subgradient_residual(H, y, w, tau_level, best, zero_tol=1e-9 * scale) / wsum
    # Decades between the 1e-2 and 1e-6 widths keep some residuals inside the
    # smoothing band at every stage, so each Newton solve has curvature.
    for rel in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
        prob = _WeightedQuantile(Ha, ya, wa * (Ha.shape[0] / n), tau_level, rel * scale)
        coef, it, _ = _newton(prob, coef, 1e-12 * wsum, 200)
        iters += it
        improved = False
        for cand in [coef, *_vertex_candidates(Ha, ya, ya - Ha @ coef, p)]:
            val = exact(cand)
            if val < best_val:
                best, best_val, improved = cand, val, True
        if improved:
            resid = subgradient_residual(H, y, w, tau_level, best, zero_tol=1e-9 * scale) / wsum
            if resid <= tol:
                break
    return FitResult("weighted_quantile", best, best_val, iters, resid, tol)


def fit_smoothed_quantile(design_h, y, weights, tau_level, eps, *, tol=1e-12) -> FitResult:
    """Newton solution of the smoothed check-loss problem at a fixed width."""
    H = _as_matrix(design_h)
    prob = _WeightedQuantile(H, np.asarray(y, float), np.asarray(weights, float), tau_level, eps)
    coef, it, g = _newton(prob, prob.null(), tol, 500)
    return FitResult("smoothed_quantile", coef, prob.loss(coef), it, g, tol)


def fit_weighted_logistic_mean(design_f, response, weights, *, tol: float = 1e-9) -> FitResult:
    """Logistic-scale mean regression of a bounded response.

    The response is mapped to [0, 1] through its weighted-sample range, so a
    transformed outcome that leaves the unit interval is still fitted on the
    logistic scale.  The range is returned in ``link_range``.
    """
    F = _as_matrix(design_f)
    z = np.asarray(response, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if not np.any(w > 0):
        raise ValueError("all weights are zero")
    lo, hi = unit_range(z, w)
    if hi == lo:
        coef = np.zeros(F.shape[1])
        return FitResult("weighted_logistic", coef, 0.0, 0, 0.0, tol, link_range=(lo, lo))
    prob = _WeightedLogisticMean(F, np.clip((z - lo) / (hi - lo), 0.0, 1.0), w)
    names = _names(design_f, F.shape[1])

    def divergence(coef):
        if np.max(np.abs(F[w > 0] @ coef)) > 40.0:
            worst = np.argsort(-np.abs(coef[1:]))[:3] + 1
            cols = ", ".join(names[j] for j in worst)
            raise SeparationError(f"logistic mean fit diverges (separation); largest coefficients on {cols}")

    coef, it, gnorm = _newton(prob, prob.null(), tol, 200, divergence=divergence)
    if gnorm > tol:
        raise FitError(f"logistic mean fit did not converge: gradient {gnorm:.3g} after {it} iterations")
    return FitResult("weighted_logistic", coef, prob.loss(coef), it, gnorm, tol, link_range=(lo, hi))


def _dependent_columns(M: np.ndarray, names: list[str]) -> list[str]:
    _, R, piv = linalg.qr(M, pivoting=True, mode="economic")
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > d[0] * max(M.shape) * np.finfo(float).eps)) if d.size else 0
    return [names[j] for j in piv[rank:]]


def fit_weighted_ls(design_f, response, weights, *, tol: float = 1e-9) -> FitResult:
    """Weighted least squares via a QR solve of the square-root-weighted system."""
    F = _as_matrix(design_f)
    z = np.asarray(response, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    act = w > 0
    if not np.any(act):
        raise ValueError("all weights are zero")
    sw = np.sqrt(w[act])
    M = F[act] * sw[:, None]
    bad = _dependent_columns(M, _names(design_f, F.shape[1]))
    if bad:
        raise FitError(f"weighted Gram matrix is singular; dependent columns: {', '.join(bad)}")
    coef = linalg.lstsq(M, z[act] * sw)[0]
    prob = _WeightedLs(F, z, w)
    # One step of iterative refinement tightens the normal equations.
    r = z[act] - F[act] @ coef
    coef = coef + linalg.lstsq(M, r * sw)[0]
    orth = float(np.max(np.abs(F.T @ (w * (z - F @ coef))) / z.size))
    return FitResult("weighted_ls", coef, prob.loss(coef), 1, orth, tol)


# ---------------------------------------------------------------------------
# Lasso variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LassoConfig:
    n_penalties: int = 25
    folds: int = 5
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 50000
    smoothing: float = 1e-2

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.n_penalties < 1:
            raise ValueError("n_penalties must be >= 1")


def penalty_grid(kappa_star: float, n_penalties: int = 25) -> np.ndarray:
    """``kappa_star / 2**(j/4)`` for ``j = 0 .. n_penalties - 1``."""
    return kappa_star / 2.0 ** (np.arange(n_penalties) / 4.0)


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold labels as a pure function of ``(seed, n)``."""
    return np.random.default_rng(seed).permutation(n) % folds


def soft_threshold(x, kappa):
    return np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)


def kkt_residual(grad: np.ndarray, coef: np.ndarray, kappa: float) -> float:
    """Lasso optimality residual with an unpenalised first coordinate."""
    g, b = grad[1:], coef[1:]
    nz = b != 0
    res = np.where(nz, np.abs(g + kappa * np.sign(b)), np.maximum(np.abs(g) - kappa, 0.0))
    return float(max(abs(grad[0]), np.max(res) if res.size else 0.0))


def _prox(v, step_kappa):
    out = soft_threshold(v, step_kappa)
    out[0] = v[0]
    return out


def prox_gradient(problem, kappa, coef0, *, rows=None, tol=1e-6, max_iter=50000, lipschitz=1.0):
    """Accelerated proximal gradient with backtracking and adaptive restart.

    Returns (coef, iterations, kkt residual, final Lipschitz estimate).
    """
    x = coef0.copy()
    fx = problem.loss(x, rows)
    yv, t_mom = x.copy(), 1.0
    L = lipschitz
    for it in range(1, max_iter + 1):
        if it % 5 == 1:
            kkt = kkt_residual(problem.grad(x, rows), x, kappa)
            if kkt <= tol:
                return x, it - 1, kkt, L
        gy = problem.grad(yv, rows)
        fy = problem.loss(yv, rows)
        while True:
            z = _prox(yv - gy / L, kappa / L)
            d = z - yv
            fz = problem.loss(z, rows)
            if np.isfinite(fz) and fz <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-15 * abs(fy):
                break
            L *= 2.0
        pen_z = fz + kappa * np.abs(z[1:]).sum()
        pen_x = fx + kappa * np.abs(x[1:]).sum()
        if pen_z > pen_x and t_mom > 1.0:
            # Objective went up: drop the momentum and retry from x.
            yv, t_mom = x.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        yv = z + ((t_mom - 1.0) / t_new) * (z - x)
        x, fx, t_mom = z, fz, t_new
        L = max(L / 1.5, 1e-12)
    kkt = kkt_residual(problem.grad(x, rows), x, kappa)
    return x, max_iter, kkt, L


@dataclass(frozen=True)
class LassoPath:
    kind: str
    penalties: np.ndarray
    coefs: np.ndarray
    kkt: np.ndarray
    iterations: np.ndarray
    cv_loss: np.ndarray | None
    selected: int
    kappa_star: float

    @property
    def coef(self) -> np.ndarray:
        return self.coefs[self.selected]

    @property
    def penalty(self) -> float:
        return float(self.penalties[self.selected])

    def as_fit(self, tol: float) -> FitResult:
        return FitResult(
            self.kind,
            self.coef,
            float("nan"),
            int(self.iterations[self.selected]),
            float(self.kkt[self.selected]),
            tol,
            penalty=self.penalty,
        )


def _make_problem(kind: str, design, data: dict, config: LassoConfig):
    M = _as_matrix(design)
    if kind == "cal_logistic":
        return _CalLogistic(M, np.asarray(data["treatment"], float), int(data.get("target_arm", 1)))
    if kind == "weighted_quantile":
        y = np.asarray(data["y"], float)
        w = np.asarray(data["weights"], float)
        if not np.any(w > 0):
            raise ValueError("all weights are zero")
        ya = y[w > 0]
        scale = float(np.std(ya)) or max(1.0, float(np.max(np.abs(ya))))
        return _WeightedQuantile(M, y, w, float(data["tau"]), config.smoothing * scale)
    if kind == "weighted_ls":
        return _WeightedLs(M, np.asarray(data["response"], float), np.asarray(data["weights"], float))
    if kind == "weighted_logistic":
        z = np.asarray(data["response"], float)
        w = np.asarray(data["weights"], float)
        lo, hi = unit_range(z, w)
        if hi == lo:
            raise FitError("constant response; the logistic mean model is degenerate")
        return _WeightedLogisticMean(M, np.clip((z - lo) / (hi - lo), 0.0, 1.0), w)
    raise ValueError(f"unknown problem kind {kind!r}")


def _solve_path(problem, penalties, rows, config):
    p = problem.F.shape[1] if hasattr(problem, "F") else problem.H.shape[1]
    coef = problem.null(rows)
    coefs = np.empty((penalties.size, p))
    kkts = np.empty(penalties.size)
    iters = np.empty(penalties.size, dtype=int)
    L = 1.0
    for i, kappa in enumerate(penalties):
        coef, it, kkt, L = prox_gradient(
            problem, float(kappa), coef, rows=rows, tol=config.tol, max_iter=config.max_iter, lipschitz=L
        )
        if kkt > config.tol:
            raise FitError(
                f"{problem.kind} Lasso did not converge at penalty {kappa:.4g}: KKT residual {kkt:.3g}"
            )
        coefs[i], kkts[i], iters[i] = coef, kkt, it
    return coefs, kkts, iters


def fit_rcal_lasso(
    problem_kind: str,
    design,
    data: dict,
    config: LassoConfig = LassoConfig(),
    *,
    penalties: np.ndarray | None = None,
    cross_validate: bool = True,
) -> LassoPath:
    """Lasso path over ``kappa* / 2**(j/4)`` with K-fold selection.

    ``data`` holds ``treatment``/``target_arm`` for ``cal_logistic``;
    ``y``/``weights``/``tau`` for ``weighted_quantile``; and
    ``response``/``weights`` for ``weighted_ls`` and ``weighted_logistic``.
    """
    problem = _make_problem(problem_kind, design, data, config)
    null = problem.null()
    g0 = problem.grad(null)
    kappa_star = float(np.max(np.abs(g0[1:]))) if g0.size > 1 else 0.0
    if penalties is None:
        penalties = penalty_grid(kappa_star, config.n_penalties)
    penalties = np.asarray(penalties, dtype=float)
    coefs, kkts, iters = _solve_path(problem, penalties, None, config)
    cv = None
    selected = 0
    if cross_validate and penalties.size > 1:
        n = _as_matrix(design).shape[0]
        labels = fold_assignment(n, config.folds, config.seed)
        cv = np.zeros(penalties.size)
        for k in range(config.folds):
            train, test = np.flatnonzero(labels != k), np.flatnonzero(labels == k)
            fold_coefs, _, _ = _solve_path(problem, penalties, train, config)
            cv += np.array([problem.validation_loss(c, test) for c in fold_coefs]) * test.size
        cv /= n
        selected = int(np.argmin(cv))
    return LassoPath(problem.kind, penalties, coefs, kkts, iters, cv, selected, kappa_star)
