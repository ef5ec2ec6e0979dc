"""Observed-data container shared by the estimators and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Outcome ``y``, binary treatment ``t`` and covariate matrix ``x``."""

    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1 or t.shape != y.shape or x.shape[0] != y.size:
            raise ValueError("y, t and x must have matching row counts")
        if y.size == 0:
            raise ValueError("dataset has zero rows")
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("treatment must be coded 0/1")
        names = tuple(self.names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValueError("covariate names do not match the covariate columns")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def binary_outcome(self) -> bool:
        return bool(np.all((self.y == 0) | (self.y == 1)))

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.y[rows], self.t[rows], self.x[rows], self.names)
