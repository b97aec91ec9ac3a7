"""Immutable tabular data model: observations, strata points, grids.

A :class:`Dataset` holds n observations of (x, z, m, y) as numpy arrays,
where x is a length-p covariate vector, z a binary treatment indicator,
m a continuous intermediate variable, and y a continuous outcome.
Datasets are frozen after construction and safe to share across workers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DataError


class Observation(NamedTuple):
    """A single row (x, z, m, y)."""

    x: np.ndarray
    z: int
    m: float
    y: float


class PrincipalPoint(NamedTuple):
    """A stratum u = (m1, m0): intermediate levels under treatment/control."""

    m1: float
    m0: float


@dataclass(frozen=True)
class GridSpec:
    """Rectangular evaluation grid over (m1, m0) strata.

    Nodes are the inclusive linspace over each range with `steps` points
    per axis, enumerated m1-major.
    """

    m1_range: tuple[float, float]
    m0_range: tuple[float, float]
    steps: int

    def __post_init__(self):
        lo1, hi1 = self.m1_range
        lo0, hi0 = self.m0_range
        if not (lo1 < hi1 and lo0 < hi0):
            raise DataError("grid ranges must satisfy lo < hi")
        if self.steps < 2:
            raise DataError("grid needs at least 2 steps per axis")

    def points(self) -> list[PrincipalPoint]:
        m1s = np.linspace(*self.m1_range, self.steps)
        m0s = np.linspace(*self.m0_range, self.steps)
        return [PrincipalPoint(float(a), float(b)) for a in m1s for b in m0s]


@dataclass(frozen=True)
class ColumnTransform:
    """Affine standardization x -> (x - mean) / sd for one column."""

    mean: float
    sd: float


@dataclass(frozen=True)
class StandardizationRecord:
    """Inverse transforms for a standardized dataset.

    `x_cols` holds one transform per covariate column; `m` and `y` the
    transforms of the intermediate and outcome columns. An identity
    record has mean 0 and sd 1 everywhere.
    """

    x_cols: tuple[ColumnTransform, ...]
    m: ColumnTransform
    y: ColumnTransform

    @staticmethod
    def identity(p: int) -> "StandardizationRecord":
        one = ColumnTransform(0.0, 1.0)
        return StandardizationRecord((one,) * p, one, one)

    def m_to_standardized(self, value: float) -> float:
        return (value - self.m.mean) / self.m.sd

    def m_to_raw(self, value: float) -> float:
        return self.m.mean + self.m.sd * value


@dataclass(frozen=True)
class Dataset:
    """n observations with covariate dimension p.

    Arrays are defensively copied and set read-only. Invariants: all
    entries finite, z in {0,1}, both arms nonempty, n >= p + 3.
    """

    x: np.ndarray
    z: np.ndarray
    m: np.ndarray
    y: np.ndarray
    standardization: Optional[StandardizationRecord] = field(default=None)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        z = np.asarray(self.z)
        m = np.asarray(self.m, dtype=float)
        y = np.asarray(self.y, dtype=float)
        n = x.shape[0]
        if z.shape != (n,) or m.shape != (n,) or y.shape != (n,):
            raise DataError("x, z, m, y must share the same number of rows")
        for name, arr in (("x", x), ("m", m), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite value in column {name}")
        zf = z.astype(float)
        if not np.all(np.isin(zf, (0.0, 1.0))):
            raise DataError("z must contain only 0 and 1")
        zi = zf.astype(np.int8)
        if zi.sum() == 0 or zi.sum() == n:
            raise DataError("both treatment arms must be nonempty")
        if n < x.shape[1] + 3:
            raise DataError(f"need at least p + 3 = {x.shape[1] + 3} rows, got {n}")
        for name, arr in (("x", x), ("z", zi), ("m", m), ("y", y)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def rows(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(self.x[i], int(self.z[i]), float(self.m[i]), float(self.y[i]))

    def subset(self, indices: np.ndarray) -> "Dataset":
        """Row-subset (e.g. a bootstrap resample); keeps the record."""
        return Dataset(
            self.x[indices], self.z[indices], self.m[indices], self.y[indices],
            standardization=self.standardization,
        )

    @staticmethod
    def from_observations(obs: Sequence[Observation]) -> "Dataset":
        return Dataset(
            np.array([o.x for o in obs], dtype=float),
            np.array([o.z for o in obs]),
            np.array([o.m for o in obs], dtype=float),
            np.array([o.y for o in obs], dtype=float),
        )


def _standardize_column(values: np.ndarray, name: str) -> tuple[np.ndarray, ColumnTransform]:
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1))
    if sd <= 0.0 or not np.isfinite(sd):
        raise DataError(f"zero variance: {name}")
    return (values - mean) / sd, ColumnTransform(mean, sd)


def standardize(data: Dataset) -> tuple[Dataset, StandardizationRecord]:
    """Center and scale every continuous column to mean 0, sd 1.

    Sample sd uses denominator n - 1. The treatment indicator is left
    untouched. Returns the standardized dataset and the record needed to
    map estimates back to the original scale.

    Raises
    ------
    DataError
        If any continuous column has zero variance.
    """
    x_new = np.empty_like(data.x)
    x_tfs = []
    for j in range(data.p):
        x_new[:, j], tf = _standardize_column(data.x[:, j], f"x{j + 1}")
        x_tfs.append(tf)
    m_new, m_tf = _standardize_column(data.m, "m")
    y_new, y_tf = _standardize_column(data.y, "y")
    record = StandardizationRecord(tuple(x_tfs), m_tf, y_tf)
    return Dataset(x_new, data.z, m_new, y_new, standardization=record), record


CSV_COLUMNS_FIXED = ("z", "m", "y")


def read_csv(path_or_buffer) -> Dataset:
    """Read a dataset from CSV with header columns x1..xp, z, m, y.

    Column order is free; names are mandatory. UTF-8, comma-separated,
    `.` decimal point. Missing or non-numeric cells are rejected.
    """
    close = False
    if isinstance(path_or_buffer, (str, bytes)):
        fh = open(path_or_buffer, "r", encoding="utf-8", newline="")
        close = True
    else:
        fh = path_or_buffer
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty CSV: missing header row")
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS_FIXED if c not in header]
        if missing:
            raise DataError(f"missing required column(s): {', '.join(missing)}")
        x_names = sorted(
            (h for h in header if h.startswith("x") and h[1:].isdigit()),
            key=lambda h: int(h[1:]),
        )
        p = len(x_names)
        if p == 0:
            raise DataError("no covariate columns x1..xp found")
        if x_names != [f"x{j}" for j in range(1, p + 1)]:
            raise DataError(f"covariate columns must be x1..x{p} without gaps")
        extra = set(header) - set(x_names) - set(CSV_COLUMNS_FIXED)
        if extra:
            raise DataError(f"unexpected column(s): {', '.join(sorted(extra))}")
        idx = {name: header.index(name) for name in header}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                parsed = [float(row[idx[name]]) for name in x_names + ["z", "m", "y"]]
            except ValueError as exc:
                raise DataError(f"row {lineno}: {exc}") from exc
            rows.append(parsed)
        if not rows:
            raise DataError("CSV contains no data rows")
        arr = np.asarray(rows, dtype=float)
        return Dataset(arr[:, :p], arr[:, p], arr[:, p + 1], arr[:, p + 2])
    finally:
        if close:
            fh.close()


def write_csv(data: Dataset, path_or_buffer) -> None:
    """Write a dataset as CSV with columns x1..xp, z, m, y."""
    close = False
    if isinstance(path_or_buffer, (str, bytes)):
        fh = open(path_or_buffer, "w", encoding="utf-8", newline="")
        close = True
    else:
        fh = path_or_buffer
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(1, data.p + 1)] + list(CSV_COLUMNS_FIXED))
        for i in range(data.n):
            writer.writerow(
                [repr(float(v)) for v in data.x[i]]
                + [str(int(data.z[i])), repr(float(data.m[i])), repr(float(data.y[i]))]
            )
    finally:
        if close:
            fh.close()


def csv_string(data: Dataset) -> str:
    buf = io.StringIO()
    write_csv(data, buf)
    return buf.getvalue()
