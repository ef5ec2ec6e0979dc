"""Command-line front end: ingest a CSV, run a bound grid, write reports.

Subcommands
-----------
bounds     closed-form population bounds for strata given in the config
estimate   CAL or RCAL sample bounds with Wald intervals
dv         risk-ratio bounds with bootstrap intervals (binary outcomes)
oracle     brute-force checks of the closed forms on random instances
simulate   draw a synthetic dataset plus its exact truth

Every run writes ``results.json`` (canonical, byte-stable for a fixed config
and seed) and ``results.csv``; ``--plots`` adds ``fig_<estimand>.svg``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .bounds_core import (
    DiscreteDistribution,
    DiscreteStratum,
    Recommended,
    SensitivityParams,
    emsm_conditional_bounds,
    population_bounds,
    summarize,
    worst_case_construction,
)
from .dataset import Dataset
from .dr_estimate import MEAN_MODELS, Estimator, strip_phi
from .dv_family import BinaryStratum, DvParams, dv_sharp_bounds, theta_grid
from .dv_sample import ESTIMANDS, BootstrapConfig, dv_bootstrap_ci
from .model_fit import DesignSpec, LassoConfig
from .oracle import (
    DiscreteInstance,
    check_construction,
    duality_scan,
    enumerate_emsm_bound,
    random_discrete_distribution,
)
from .synthetic import SyntheticDgp, generate_synthetic

logger = logging.getLogger("sensbounds")

COLUMNS = (
    "estimand",
    "lambda",
    "delta",
    "theta",
    "method",
    "model",
    "bound_lower",
    "bound_upper",
    "se_lower",
    "se_upper",
    "ci_lower",
    "ci_upper",
    "status",
)
OUTCOME_KINDS = ("binary", "continuous-nonneg", "continuous")


class InputError(ValueError):
    """Malformed input file or configuration."""


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnRoles:
    outcome: str = "y"
    treatment: str = "t"
    covariates: tuple[str, ...] | None = None


def ingest_csv(path: str | Path, roles: ColumnRoles = ColumnRoles()) -> Dataset:
    """Read a UTF-8 CSV with a header row into a :class:`Dataset`.

    Categorical covariates must already be expanded into indicator columns.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        rows = list(reader)
    for col in (roles.outcome, roles.treatment):
        if col not in header:
            raise InputError(f"{path}: missing column {col!r}")
    covs = list(roles.covariates) if roles.covariates is not None else [
        h for h in header if h not in (roles.outcome, roles.treatment)
    ]
    for col in covs:
        if col not in header:
            raise InputError(f"{path}: missing covariate column {col!r}")
    pos = {h: i for i, h in enumerate(header)}
    wanted = [roles.outcome, roles.treatment, *covs]
    values = np.empty((len(rows), len(wanted)))
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for c, col in enumerate(wanted):
            cell = row[pos[col]].strip()
            if cell == "" or cell.upper() in ("NA", "NAN"):
                raise InputError(f"{path}: missing value at row {r}, column {col!r}")
            try:
                values[r - 2, c] = float(cell)
            except ValueError:
                raise InputError(f"{path}: non-numeric value {cell!r} at row {r}, column {col!r}") from None
        if values[r - 2, 1] not in (0.0, 1.0):
            raise InputError(f"{path}: treatment must be 0 or 1, got {row[pos[roles.treatment]]!r} at row {r}")
    if not rows:
        raise InputError(f"{path}: no data rows")
    logger.info("read %d rows, %d covariates from %s", len(rows), len(covs), path)
    return Dataset(values[:, 0], values[:, 1], values[:, 2:], tuple(covs))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class AnalysisConfig:
    input: str | None = None
    outcome: str = "y"
    treatment: str = "t"
    covariates: list[str] | None = None
    outcome_kind: str | None = None
    interactions: bool = False
    standardize: bool = True
    min_count: int = 0
    method: str = "CAL"
    mean_model: str = "linear"
    lambda_grid: list[float] = field(default_factory=lambda: [1.0, 1.5, 2.0])
    delta_grid: list[float] = field(default_factory=lambda: [0.2, 0.5, 0.8, 1.0])
    theta_grid: list[float] | None = None
    level: float = 0.9
    seed: int = 0
    bootstrap: int = 1000
    folds: int = 5
    strata: list[dict] | None = None
    dgp: dict | None = None
    instances: int = 50
    grid_resolution: int = 50

    def validate(self) -> None:
        if not self.lambda_grid or not self.delta_grid:
            raise InputError("lambda_grid and delta_grid must be nonempty")
        if any(l < 1 for l in self.lambda_grid):
            raise InputError("lambda values must be >= 1")
        if any(not 0 <= d <= 1 for d in self.delta_grid):
            raise InputError("delta values must lie in [0, 1]")
        if not 0 < self.level < 1:
            raise InputError("level must lie in (0, 1)")
        if self.method not in ("CAL", "RCAL", "DV"):
            raise InputError("method must be CAL, RCAL or DV")
        if self.mean_model not in MEAN_MODELS:
            raise InputError(f"mean_model must be one of {MEAN_MODELS}")
        if self.outcome_kind is not None and self.outcome_kind not in OUTCOME_KINDS:
            raise InputError(f"outcome_kind must be one of {OUTCOME_KINDS}")
        if self.method == "DV" and self.outcome_kind not in (None, "binary"):
            raise InputError("the DV method needs a binary outcome")

    @property
    def design_spec(self) -> DesignSpec:
        return DesignSpec(self.interactions, self.standardize, self.min_count)

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(asdict(self)).encode()).hexdigest()


def load_config(path: str | None, overrides: dict) -> AnalysisConfig:
    raw: dict[str, Any] = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = set(AnalysisConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(unknown)}")
    cfg = AnalysisConfig(**raw)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _clean(value):
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def make_row(**kw) -> dict:
    row = {c: None for c in COLUMNS}
    row["status"] = "ok"
    row.update(kw)
    return row


def _sort_key(row: dict):
    def num(v):
        if v is None:
            return -math.inf
        return math.inf if v == "inf" else float(v)

    return (row["estimand"], num(row["lambda"]), num(row["delta"]), num(row["theta"]), row["method"] or "")


def write_outputs(out_dir: Path, command: str, cfg: AnalysisConfig, rows: list[dict], errors: list[str],
                  extra: dict | None = None, plots: bool = False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=_sort_key)
    payload = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "columns": list(COLUMNS),
        "rows": rows,
        "errors": errors,
        "partial": bool(errors),
    }
    if extra:
        payload.update(extra)
    (out_dir / "results.json").write_text(canonical_json(payload), encoding="utf-8")
    with open(out_dir / "results.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow(["NA" if row[c] is None else _clean(row[c]) for c in COLUMNS])
    if plots:
        render_plots(out_dir, rows)


def render_plots(out_dir: Path, rows: list[dict]) -> None:
    """Bound-versus-lambda figures, one per estimand, with interval whiskers."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sensbounds"
    for estimand in sorted({r["estimand"] for r in rows}):
        sel = [r for r in rows if r["estimand"] == estimand and r["status"] == "ok"]
        fig, ax = plt.subplots(figsize=(6, 4))
        groups = sorted({(r["delta"] if r["delta"] is not None else -1, r["theta"] or -1) for r in sel})
        for i, (d, th) in enumerate(groups):
            pts = [r for r in sel if (r["delta"] if r["delta"] is not None else -1, r["theta"] or -1) == (d, th)]
            lam = np.array([r["lambda"] for r in pts], float) + 0.01 * i
            for key, style in (("bound_lower", "v-"), ("bound_upper", "^-")):
                vals = np.array([_finite(r[key]) for r in pts])
                ax.plot(lam, vals, style, color=f"C{i % 10}", label=_label(d, th) if key == "bound_upper" else None)
            for r, x in zip(pts, lam):
                lo, hi = _finite(r["ci_lower"]), _finite(r["ci_upper"])
                if np.isfinite(lo) and np.isfinite(hi):
                    ax.vlines(x, lo, hi, color=f"C{i % 10}", alpha=0.4)
        ax.set_xlabel("Lambda")
        ax.set_ylabel(estimand)
        if groups:
            ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(out_dir / f"fig_{estimand}.svg", format="svg", metadata={"Date": None})
        plt.close(fig)


def _finite(v) -> float:
    return float(v) if isinstance(v, (int, float)) else float("nan")


def _label(d, th) -> str:
    parts = []
    if d is not None and d >= 0:
        parts.append(f"delta={d:g}")
    if th not in (None, -1):
        parts.append(f"theta={th:g}")
    return ", ".join(parts) or "bounds"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _dataset(cfg: AnalysisConfig) -> Dataset:
    if not cfg.input:
        raise InputError("this subcommand needs an input CSV (config key 'input')")
    data = ingest_csv(cfg.input, ColumnRoles(cfg.outcome, cfg.treatment,
                                             tuple(cfg.covariates) if cfg.covariates else None))
    if cfg.outcome_kind == "binary" and not data.binary_outcome:
        raise InputError("outcome_kind is binary but the outcome column is not 0/1")
    if cfg.outcome_kind == "continuous-nonneg" and np.any(data.y < 0):
        raise InputError("outcome_kind is continuous-nonneg but the outcome has negative values")
    return data


def _strata(cfg: AnalysisConfig) -> list[DiscreteStratum]:
    if not cfg.strata:
        raise InputError("the bounds subcommand needs 'strata' in the config")
    out = []
    for s in cfg.strata:
        out.append(DiscreteStratum(
            float(s["weight"]), float(s["propensity"]),
            DiscreteDistribution(s["treated"]["values"], s["treated"]["probs"]),
            DiscreteDistribution(s["control"]["values"], s["control"]["probs"]),
        ))
    return out


def _theta_values(cfg: AnalysisConfig, delta: float, tau_level: float) -> list[float | None]:
    values = list(cfg.theta_grid) if cfg.theta_grid is not None else theta_grid(delta, tau_level)
    # At delta = 1 every aligned value is inf; keep one of each.
    out: list[float | None] = []
    for v in values:
        if v is None or v not in out:
            out.append(v)
    return out


def cmd_bounds(cfg: AnalysisConfig) -> tuple[list[dict], list[str], dict]:
    strata = _strata(cfg)
    rows: list[dict] = []
    errors: list[str] = []
    binary = all(set(s.treated.support) <= {0.0, 1.0} and set(s.control.support) <= {0.0, 1.0} for s in strata)
    for lam in cfg.lambda_grid:
        for delta in cfg.delta_grid:
            params = SensitivityParams.symmetric(lam, Recommended(delta))
            pb = population_bounds(params, strata)
            model = "MSM" if delta == 1.0 else "eMSM"
            for est, lo, up in (("mu1", pb.mu1_lower, pb.mu1_upper), ("mu0", pb.mu0_lower, pb.mu0_upper),
                                ("ate", pb.ate_lower, pb.ate_upper)):
                rows.append(make_row(estimand=est, **{"lambda": lam}, delta=delta, method="closed-form",
                                     model=model, bound_lower=lo, bound_upper=up))
            if not binary:
                continue
            for theta in _theta_values(cfg, delta, params.tau):
                if theta is None:
                    rows.extend(make_row(estimand=est, **{"lambda": lam}, delta=delta, method="closed-form",
                                         model="DV", status="NA") for est in ("mu1", "mu0", "ate"))
                    continue
                dvp = DvParams(theta, params.lambda1, params.lambda2)
                agg = np.zeros(4)
                for s in strata:
                    b = dv_sharp_bounds(BinaryStratum(s.treated.mean, s.control.mean, s.propensity), dvp)
                    agg += s.weight * np.array([b.mu1_lower, b.mu1_upper, b.mu0_lower, b.mu0_upper])
                for est, lo, up in (("mu1", agg[0], agg[1]), ("mu0", agg[2], agg[3]), ("ate", agg[0] - agg[3], agg[1] - agg[2])):
                    rows.append(make_row(estimand=est, **{"lambda": lam}, delta=delta, theta=theta,
                                         method="closed-form", model="DV", bound_lower=lo, bound_upper=up))
    return rows, errors, {}


def cmd_estimate(cfg: AnalysisConfig) -> tuple[list[dict], list[str], dict]:
    data = _dataset(cfg)
    method = cfg.method if cfg.method in ("CAL", "RCAL") else "CAL"
    lasso = LassoConfig(folds=cfg.folds, seed=cfg.seed)
    rows: list[dict] = []
    errors: list[str] = []
    est = Estimator(data, method, cfg.design_spec, lasso, mean_model=cfg.mean_model)
    for lam in cfg.lambda_grid:
        for delta in cfg.delta_grid:
            try:
                reports = est.estimate_bounds(lam, delta, cfg.level)
            except Exception as exc:  # a failed cell is recorded, the rest still run
                errors.append(f"lambda={lam:g}, delta={delta:g}: {exc}")
                rows.append(make_row(estimand="mu1", **{"lambda": lam}, delta=delta, method=est.label,
                                     status="error"))
                continue
            for r in map(strip_phi, reports):
                lo, hi = r.ci_two_sided
                rows.append(make_row(
                    estimand=r.estimand, **{"lambda": r.lam}, delta=r.delta, method=r.method, model=r.model,
                    bound_lower=r.mu_hat_lower, bound_upper=r.mu_hat_upper,
                    se_lower=r.se_lower, se_upper=r.se_upper, ci_lower=lo, ci_upper=hi,
                ))
    return rows, errors, {"n": data.n}


def cmd_dv(cfg: AnalysisConfig) -> tuple[list[dict], list[str], dict]:
    data = _dataset(cfg)
    if not data.binary_outcome:
        raise InputError("the DV method needs a binary outcome")
    rows: list[dict] = []
    errors: list[str] = []
    boot = BootstrapConfig(cfg.bootstrap, cfg.seed, cfg.level)
    for lam in cfg.lambda_grid:
        params = SensitivityParams.symmetric(lam)
        for delta in cfg.delta_grid:
            thetas = _theta_values(cfg, delta, params.tau)
            valid = [th for th in thetas if th is not None]
            for th in thetas:
                if th is None:
                    rows.extend(make_row(estimand=est, **{"lambda": lam}, delta=delta, method="DV",
                                         model="DV", status="NA") for est in ESTIMANDS)
            if not valid:
                continue
            try:
                intervals = dv_bootstrap_ci(
                    data, [DvParams(th, params.lambda1, params.lambda2) for th in valid], boot,
                    spec=cfg.design_spec,
                )
            except Exception as exc:
                errors.append(f"lambda={lam:g}, delta={delta:g}: {exc}")
                continue
            for iv in intervals:
                rows.append(make_row(
                    estimand=iv.estimand, **{"lambda": lam}, delta=delta, theta=iv.theta, method="DV", model="DV",
                    bound_lower=iv.point_lower, bound_upper=iv.point_upper, se_lower=iv.se_lower,
                    se_upper=iv.se_upper, ci_lower=iv.ci_lower, ci_upper=iv.ci_upper,
                ))
    return rows, errors, {"n": data.n, "bootstrap": cfg.bootstrap}


def cmd_oracle(cfg: AnalysisConfig) -> tuple[list[dict], list[str], dict]:
    rng = np.random.default_rng(cfg.seed)
    rows: list[dict] = []
    errors: list[str] = []
    for i in range(cfg.instances):
        dist = random_discrete_distribution(rng)
        lam = float(rng.choice(cfg.lambda_grid))
        delta = float(rng.choice(cfg.delta_grid))
        params = SensitivityParams.symmetric(lam, Recommended(delta))
        formula = emsm_conditional_bounds(params, summarize(dist, params.tau)).upper
        res = enumerate_emsm_bound(DiscreteInstance(dist, params), cfg.grid_resolution)
        wc = worst_case_construction(params, dist, "upper")
        chk = check_construction(wc, dist, params)
        scan = duality_scan(dist, params)
        ok = (res.value <= formula + 1e-8 and formula - res.value <= res.slack and chk.feasible
              and abs(chk.value - formula) <= 1e-10 and scan.q_star_in_argmin)
        if not ok:
            errors.append(f"instance {i}: formula {formula!r}, oracle {res.value!r}, slack {res.slack!r}")
        rows.append(make_row(estimand=f"instance_{i:04d}", **{"lambda": lam}, delta=delta, method="oracle",
                             model="eMSM", bound_lower=res.value, bound_upper=formula,
                             status="ok" if ok else "mismatch"))
    return rows, errors, {"instances": cfg.instances}


def cmd_simulate(cfg: AnalysisConfig, out_dir: Path) -> tuple[list[dict], list[str], dict]:
    dgp = SyntheticDgp(**{k: tuple(v) if isinstance(v, list) else v for k, v in (cfg.dgp or {}).items()})
    sample = generate_synthetic(dgp, cfg.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = sample.data
    with open(out_dir / "data.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["y", "t", *d.names])
        for i in range(d.n):
            writer.writerow([repr(float(d.y[i])), int(d.t[i]), *[repr(float(v)) for v in d.x[i]]])
    (out_dir / "truth.json").write_text(canonical_json(sample.truth), encoding="utf-8")
    tr = sample.truth
    rows = [
        make_row(estimand=e, **{"lambda": dgp.lam}, delta=dgp.delta, method="truth",
                 model="MSM" if dgp.delta == 1.0 else "eMSM",
                 bound_lower=tr[f"{e}_lower"], bound_upper=tr[f"{e}_upper"])
        for e in ("mu1", "mu0", "ate")
    ]
    return rows, [], {"n": d.n}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sensbounds", description="Sensitivity bounds for treatment effects under unmeasured confounding."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("bounds", "closed-form population bounds for strata given in the config"),
        ("estimate", "CAL/RCAL sample bounds with Wald intervals"),
        ("dv", "risk-ratio bounds with bootstrap intervals (binary outcomes)"),
        ("oracle", "brute-force checks of the closed forms on random instances"),
        ("simulate", "draw a synthetic dataset with exact truth"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--out-dir", default="out", help="output directory (default: out)")
        p.add_argument("--plots", action="store_true", help="also write fig_<estimand>.svg")
        p.add_argument("--input", help="input CSV (overrides the config)")
        if name == "estimate":
            p.add_argument("--method", choices=["CAL", "RCAL"], help="estimation method")
            p.add_argument("--mean-model", choices=list(MEAN_MODELS), help="outcome mean regression scale")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {
        "seed": args.seed,
        "input": args.input,
        "method": getattr(args, "method", None),
        "mean_model": getattr(args, "mean_model", None),
    }
    if args.command == "dv":
        overrides["method"] = "DV"
    out_dir = Path(args.out_dir)
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "bounds":
            rows, errors, extra = cmd_bounds(cfg)
        elif args.command == "estimate":
            rows, errors, extra = cmd_estimate(cfg)
        elif args.command == "dv":
            rows, errors, extra = cmd_dv(cfg)
        elif args.command == "oracle":
            rows, errors, extra = cmd_oracle(cfg)
        else:
            rows, errors, extra = cmd_simulate(cfg, out_dir)
    except (InputError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_outputs(out_dir, args.command, cfg, rows, errors, extra, plots=args.plots)
    for msg in errors:
        print(f"warning: {msg}", file=sys.stderr)
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main())
