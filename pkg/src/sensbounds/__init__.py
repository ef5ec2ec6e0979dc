"""Sharp bounds and doubly robust estimation for treatment effects under
unmeasured confounding, with outcome-restricted sensitivity models."""

from .bounds_core import (
    DiscreteDistribution,
    ExplicitDeltas,
    MsmUnrestricted,
    Recommended,
    SensitivityParams,
    emsm_conditional_bounds,
    msm_conditional_bounds,
    population_bounds,
    summarize,
)
from .dataset import Dataset
from .dr_estimate import estimate_bounds, run_grid
from .dv_family import DvParams, dv_sharp_bounds, theta_plus_minus

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DiscreteDistribution",
    "DvParams",
    "ExplicitDeltas",
    "MsmUnrestricted",
    "Recommended",
    "SensitivityParams",
    "dv_sharp_bounds",
    "emsm_conditional_bounds",
    "estimate_bounds",
    "msm_conditional_bounds",
    "population_bounds",
    "run_grid",
    "summarize",
    "theta_plus_minus",
]
