"""Analysis sample: outcomes, binary treatment, covariates.

Covariate column order (header order of the source CSV) defines the index
``j`` used by leave-one-out benchmarking.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray


class DataError(ValueError):
    """Invalid input data, with location information in the message."""


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    outcomes: NDArray[np.float64]
    treatment: NDArray[np.int8]
    covariates: NDArray[np.float64]
    covariate_names: tuple[str, ...]

    def __post_init__(self) -> None:
        y = np.asarray(self.outcomes, dtype=float)
        z = np.asarray(self.treatment)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1:
            raise DataError("outcomes must be a vector")
        n = y.size
        if z.shape != (n,) or x.shape[0] != n:
            raise DataError(
                f"length mismatch: outcomes {n}, treatment {z.shape}, covariates {x.shape}"
            )
        if not np.all((z == 0) | (z == 1)):
            bad = int(np.flatnonzero((z != 0) & (z != 1))[0])
            raise DataError(f"treatment value {z[bad]!r} at row {bad} is not 0 or 1")
        names = tuple(str(s) for s in self.covariate_names)
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} covariate names for {x.shape[1]} columns")
        if x.shape[1] < 1:
            raise DataError("at least one covariate is required")
        if len(set(names)) != len(names):
            raise DataError("covariate names must be unique")
        if not np.all(np.isfinite(y)):
            raise DataError(f"non-finite outcome at row {int(np.flatnonzero(~np.isfinite(y))[0])}")
        if not np.all(np.isfinite(x)):
            r, c = np.argwhere(~np.isfinite(x))[0]
            raise DataError(f"non-finite covariate at row {r}, column {names[c]!r}")
        n_treated = int(z.sum())
        if n_treated < 1:
            raise DataError("no treated units")
        if n - n_treated < 2:
            raise DataError(f"need at least 2 control units, found {n - n_treated}")
        object.__setattr__(self, "outcomes", _frozen(y))
        object.__setattr__(self, "treatment", _frozen(z.astype(np.int8)))
        object.__setattr__(self, "covariates", _frozen(x))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.outcomes.size

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def treated_mean(self) -> float:
        return float(self.outcomes[self.treatment == 1].mean())

    def column_index(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}") from None

    def resolve_columns(self, cols: Sequence[str | int] | None) -> list[int]:
        """Map names or indices to sorted unique column indices (``None`` = all)."""
        if cols is None:
            return list(range(self.p))
        out = []
        for c in cols:
            j = self.column_index(c) if isinstance(c, str) else int(c)
            if not 0 <= j < self.p:
                raise KeyError(f"covariate index {j} out of range")
            out.append(j)
        return sorted(set(out))

    def take(self, idx: ArrayLike) -> Dataset:
        """Row subset (used by the bootstrap); validation reruns."""
        idx = np.asarray(idx)
        return Dataset(
            self.outcomes[idx], self.treatment[idx], self.covariates[idx], self.covariate_names
        )

    def to_csv(self, path: str | Path, outcome_col: str = "y", treatment_col: str = "z") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([outcome_col, treatment_col, *self.covariate_names])
            for i in range(self.n):
                # repr round-trips float64 exactly
                w.writerow(
                    [repr(float(self.outcomes[i])), int(self.treatment[i])]
                    + [repr(float(v)) for v in self.covariates[i]]
                )


@dataclass(frozen=True)
class ControlView:
    indices: NDArray[np.intp]
    outcomes: NDArray[np.float64]
    covariates: NDArray[np.float64] = field(repr=False)


def control_view(d: Dataset) -> ControlView:
    idx = np.flatnonzero(d.treatment == 0)
    return ControlView(_frozen(idx), _frozen(d.outcomes[idx]), _frozen(d.covariates[idx]))


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"non-numeric value {text!r} at row {row}, column {col!r}") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value {text!r} at row {row}, column {col!r}")
    return v


def load_csv(path: str | Path, outcome_col: str, treatment_col: str) -> Dataset:
    """Read a headered CSV; every column other than outcome and treatment is a covariate.

    Row numbers in error messages are 1-based data rows (the header is row 0).
    Missing values are rejected; encode missingness as its own indicator column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    for name, what in ((outcome_col, "outcome"), (treatment_col, "treatment")):
        if name not in header:
            raise DataError(f"{what} column {name!r} not found in header {header}")
    if len(set(header)) != len(header):
        raise DataError("duplicate column names in header")
    yi = header.index(outcome_col)
    zi = header.index(treatment_col)
    xcols = [j for j in range(len(header)) if j not in (yi, zi)]

    n = len(rows)
    y = np.empty(n)
    z = np.empty(n, dtype=np.int8)
    x = np.empty((n, len(xcols)))
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise DataError(f"row {i} has {len(r)} fields, expected {len(header)}")
        y[i - 1] = _parse_float(r[yi].strip(), i, outcome_col)
        zv = _parse_float(r[zi].strip(), i, treatment_col)
        if zv not in (0.0, 1.0):
            raise DataError(f"treatment value {r[zi].strip()!r} at row {i} is not 0 or 1")
        z[i - 1] = int(zv)
        for k, j in enumerate(xcols):
            x[i - 1, k] = _parse_float(r[j].strip(), i, header[j])

    n_control = int((z == 0).sum())
    if n_control < 2:
        raise DataError(f"{path}: need at least 2 control units, found {n_control}")
    return Dataset(y, z, x, tuple(header[j] for j in xcols))
