"""Population mortality tables and per-individual hazard trajectories.

A rate table stores a daily mortality hazard for every (age, calendar
year, sex) cell.  Individuals are matched to cells by aging them along
their follow-up: at day ``t`` after origin the relevant cell is

    age   = floor((age_at_origin_days + t) / 365.241)
    year  = calendar year of (date_at_origin + t days)

Lookups outside the table are clamped to the nearest cell.  The hazard
is treated as piecewise constant per day, with cell switches on the day
an individual's integer age or calendar year increments; the cumulative
hazard is therefore continuous and piecewise linear.

The year length of 365.241 days used for age arithmetic is a convention
of the mortality-table ecosystem; results are mildly sensitive to it.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

DAYS_PER_YEAR = 365.241

_SEX_CODES = {"m": 0, "male": 0, "1": 0, "f": 1, "female": 1, "2": 1}


class RateTableError(ValueError):
    """Malformed or incomplete rate-table input."""


def _sex_index(sex) -> int:
    try:
        return _SEX_CODES[str(sex).strip().lower()]
    except KeyError:
        raise RateTableError(f"unrecognized sex code {sex!r}") from None


@dataclass(frozen=True)
class Demographics:
    """Covariates needed to match one individual to the rate table."""

    age_at_origin: float        # days
    sex: str                    # "male" or "female"
    date_at_origin: date

    def __post_init__(self):
        if self.age_at_origin < 0:
            raise ValueError("age_at_origin must be >= 0")
        _sex_index(self.sex)

    @property
    def sex_idx(self) -> int:
        return _sex_index(self.sex)

    @property
    def origin_epoch_day(self) -> int:
        return (self.date_at_origin - date(1970, 1, 1)).days


@dataclass(frozen=True)
class RateTable:
    """Daily hazards on a dense (age, year, sex) grid.

    ``values[a, y, s]`` is the hazard per day at integer age
    ``min_age + a`` during calendar year ``min_year + y`` for sex index
    ``s`` (0 = male, 1 = female).
    """

    min_age: int
    min_year: int
    values: np.ndarray  # (n_ages, n_years, 2), 1/day

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise RateTableError("values must have shape (ages, years, 2)")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise RateTableError("hazards must be finite and >= 0")

    @property
    def max_age(self) -> int:
        return self.min_age + self.values.shape[0] - 1

    @property
    def max_year(self) -> int:
        return self.min_year + self.values.shape[1] - 1

    def hazard_at(self, age_years: int, year: int, sex) -> float:
        """Daily hazard of a single cell, clamped at the table edges."""
        a = min(max(int(age_years), self.min_age), self.max_age) - self.min_age
        y = min(max(int(year), self.min_year), self.max_year) - self.min_year
        return float(self.values[a, y, _sex_index(sex)])


def load_ratetable(path: str | Path) -> RateTable:
    """Load a rate table from CSV.

    The first line must be a directive ``#value: qx`` or
    ``#value: daily_hazard`` declaring the unit of the ``value`` column;
    then a header ``age,year,sex,value``.  Annual death probabilities qx
    are converted to daily hazards as ``-ln(1 - qx) / 365.241``.  The
    age and year axes must be contiguous and the grid complete.
    """
    path = Path(path)
    with open(path) as fh:
        directive = fh.readline().strip()
        if not directive.startswith("#value:"):
            raise RateTableError(
                f"{path}: missing '#value: qx|daily_hazard' directive line"
            )
        unit = directive.split(":", 1)[1].strip()
        if unit not in ("qx", "daily_hazard"):
            raise RateTableError(f"{path}: unknown value unit {unit!r}")
        df = pd.read_csv(fh)

    missing = {"age", "year", "sex", "value"} - set(df.columns)
    if missing:
        raise RateTableError(f"{path}: missing columns {sorted(missing)}")

    ages = np.sort(df["age"].unique())
    years = np.sort(df["year"].unique())
    for axis, name in ((ages, "age"), (years, "year")):
        if not np.array_equal(axis, np.arange(axis[0], axis[-1] + 1)):
            raise RateTableError(f"{path}: {name} axis has gaps")

    vals = df["value"].to_numpy(dtype=float)
    if np.any(vals < 0):
        raise RateTableError(f"{path}: negative values")
    if unit == "qx":
        if np.any(vals >= 1):
            raise RateTableError(f"{path}: qx values must be < 1")
        vals = -np.log1p(-vals) / DAYS_PER_YEAR

    grid = np.full((len(ages), len(years), 2), np.nan)
    if len(df) != grid.size:
        raise RateTableError(f"{path}: duplicate or missing (age, year, sex) rows")
    a_idx = df["age"].to_numpy(int) - ages[0]
    y_idx = df["year"].to_numpy(int) - years[0]
    s_idx = np.array([_sex_index(s) for s in df["sex"]])
    grid[a_idx, y_idx, s_idx] = vals
    if np.any(np.isnan(grid)):
        raise RateTableError(f"{path}: incomplete (age, year, sex) grid")
    return RateTable(int(ages[0]), int(years[0]), grid)


def demo_ratetable() -> RateTable:
    """Synthetic general-population table bundled for tests and demos."""
    ref = resources.files("relmsm.resources").joinpath("demo_ratetable.csv")
    with resources.as_file(ref) as path:
        return load_ratetable(path)


# ---------------------------------------------------------------------------
# Per-individual trajectories

_EPOCH_1970_YEAR_OFFSET = 1970


def _year_of_epoch_day(epoch_days: np.ndarray) -> np.ndarray:
    """Calendar year of days since 1970-01-01 (vectorized)."""
    return (
        np.asarray(epoch_days, dtype=np.int64)
        .astype("datetime64[D]")
        .astype("datetime64[Y]")
        .astype(np.int64)
        + _EPOCH_1970_YEAR_OFFSET
    )


def daily_hazard_matrix(
    table: RateTable,
    age_days: np.ndarray,
    sex_idx: np.ndarray,
    origin_epoch_day: np.ndarray,
    n_days: int,
    chunk: int = 512,
) -> np.ndarray:
    """Daily hazards for many individuals at once.

    Returns an (n, n_days) array whose column ``d`` holds each
    individual's hazard over the day interval ``(d, d+1]``.
    """
    n = len(age_days)
    out = np.empty((n, n_days), dtype=float)
    if n == 0 or n_days == 0:
        return out
    days = np.arange(n_days, dtype=np.int64)
    # year per epoch day via one small lookup table instead of per-cell
    # datetime conversions
    d_lo = int(np.min(origin_epoch_day))
    d_hi = int(np.max(origin_epoch_day)) + n_days
    year_lut = _year_of_epoch_day(np.arange(d_lo, d_hi + 1))
    np.clip(year_lut, table.min_year, table.max_year, out=year_lut)
    year_lut -= table.min_year
    flat = np.ascontiguousarray(table.values).reshape(-1)
    n_years = table.values.shape[1]

    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        age_idx = ((age_days[lo:hi, None] + days[None, :]) / DAYS_PER_YEAR).astype(
            np.int64
        )
        np.clip(age_idx, table.min_age, table.max_age, out=age_idx)
        age_idx -= table.min_age
        yr_idx = year_lut[(origin_epoch_day[lo:hi, None] - d_lo) + days[None, :]]
        cell = (age_idx * n_years + yr_idx) * 2 + sex_idx[lo:hi, None]
        out[lo:hi] = flat[cell]
    return out


def daily_hazard_vector(table: RateTable, dem: Demographics, n_days: int) -> np.ndarray:
    """Daily hazards of one individual for days ``(d, d+1]``, d < n_days."""
    return daily_hazard_matrix(
        table,
        np.array([dem.age_at_origin], dtype=float),
        np.array([dem.sex_idx]),
        np.array([dem.origin_epoch_day], dtype=np.int64),
        n_days,
    )[0]


def individual_hazard(table: RateTable, dem: Demographics, t_days: float) -> float:
    """Daily hazard of one individual at follow-up time ``t_days``."""
    if t_days < 0:
        raise ValueError("t_days must be >= 0")
    age = int((dem.age_at_origin + t_days) / DAYS_PER_YEAR)
    d = date.fromordinal(
        date(1970, 1, 1).toordinal() + dem.origin_epoch_day + int(t_days)
    )
    return table.hazard_at(age, d.year, dem.sex)


def cumulative_pop_hazard(
    table: RateTable, dem: Demographics, from_day: float, to_day: float
) -> float:
    """Integral of the individual's hazard over ``(from_day, to_day]``.

    Exact for the piecewise-constant-per-day hazard: full days are
    summed, partial days contribute proportionally.
    """
    if to_day < from_day:
        raise ValueError("to_day must be >= from_day")
    if to_day == from_day:
        return 0.0
    haz = daily_hazard_vector(table, dem, int(np.ceil(to_day)))
    cum = np.concatenate([[0.0], np.cumsum(haz)])

    def cum_at(t: float) -> float:
        d = int(t)
        frac = t - d
        val = cum[d]
        if frac > 0:
            val += frac * haz[d]
        return float(val)

    return cum_at(to_day) - cum_at(from_day)
