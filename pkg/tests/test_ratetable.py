import math
from datetime import date

import numpy as np
import pytest

from relmsm.ratetable import (
    DAYS_PER_YEAR,
    Demographics,
    RateTable,
    RateTableError,
    cumulative_pop_hazard,
    daily_hazard_matrix,
    daily_hazard_vector,
    demo_ratetable,
    individual_hazard,
    load_ratetable,
)


def write_table(tmp_path, text, name="rt.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def constant_table(rate_per_day, min_age=0, max_age=110, min_year=1980, max_year=2020):
    shape = (max_age - min_age + 1, max_year - min_year + 1, 2)
    return RateTable(min_age, min_year, np.full(shape, float(rate_per_day)))


def test_qx_conversion_oracle(tmp_path):
    path = write_table(
        tmp_path,
        "#value: qx\nage,year,sex,value\n"
        "60,2000,M,0.01\n60,2000,F,0.0\n61,2000,M,0.5\n61,2000,F,0.0\n",
    )
    rt = load_ratetable(path)
    # independent conversion: constant in-year hazard solving exp(-h*365.241) = 1 - qx
    expected = -math.log(1 - 0.01) / 365.241
    assert rt.hazard_at(60, 2000, "M") == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(2.7516998e-5, rel=1e-7)
    assert rt.hazard_at(60, 2000, "F") == 0.0


def test_daily_hazard_unit_passthrough(tmp_path):
    path = write_table(
        tmp_path,
        "#value: daily_hazard\nage,year,sex,value\n"
        "50,1999,M,1e-5\n50,1999,F,2e-5\n",
    )
    rt = load_ratetable(path)
    assert rt.hazard_at(50, 1999, "F") == 2e-5


@pytest.mark.parametrize(
    "body,err",
    [
        ("60,2000,M,1.0\n60,2000,F,0.1\n", "qx"),
        ("60,2000,M,-0.1\n60,2000,F,0.1\n", "negative"),
        ("60,1998,M,.1\n60,1998,F,.1\n60,2000,M,.1\n60,2000,F,.1\n", "gaps"),
        ("60,2000,M,.1\n", "incomplete|missing"),
    ],
)
def test_load_errors(tmp_path, body, err):
    path = write_table(tmp_path, "#value: qx\nage,year,sex,value\n" + body)
    with pytest.raises(RateTableError, match=err):
        load_ratetable(path)


def test_missing_directive(tmp_path):
    path = write_table(tmp_path, "age,year,sex,value\n60,2000,M,0.1\n")
    with pytest.raises(RateTableError, match="directive"):
        load_ratetable(path)


def distinct_cells_table():
    # encode cell identity in the value: age + year/10000 + sex/10
    ages = np.arange(55, 71)
    years = np.arange(1995, 2006)
    vals = np.empty((len(ages), len(years), 2))
    for i, a in enumerate(ages):
        for j, y in enumerate(years):
            for s in (0, 1):
                vals[i, j, s] = (a + y / 10000 + s / 10) * 1e-6
    return RateTable(55, 1995, vals)


def test_individual_lookup_cells():
    rt = distinct_cells_table()
    dem = Demographics(60.0 * DAYS_PER_YEAR, "male", date(2000, 1, 1))
    assert individual_hazard(rt, dem, 0) == rt.hazard_at(60, 2000, "M")
    # 2000 is a leap year: 366 days later is 2001-01-01, age has passed 61
    assert individual_hazard(rt, dem, 366) == rt.hazard_at(61, 2001, "M")
    f = Demographics(60.0 * DAYS_PER_YEAR, "female", date(2000, 1, 1))
    assert individual_hazard(rt, f, 0) == rt.hazard_at(60, 2000, "F")


def test_clamping_at_boundaries():
    rt = distinct_cells_table()
    old = Demographics(90.0 * DAYS_PER_YEAR, "male", date(2000, 6, 1))
    assert individual_hazard(rt, old, 0) == rt.hazard_at(70, 2000, "M")
    young = Demographics(0.0, "female", date(1980, 1, 1))
    assert individual_hazard(rt, young, 0) == rt.hazard_at(55, 1995, "F")


def test_cumulative_constant():
    rt = constant_table(3e-5)
    dem = Demographics(50 * DAYS_PER_YEAR, "male", date(2000, 1, 1))
    assert cumulative_pop_hazard(rt, dem, 0, 100) == pytest.approx(100 * 3e-5, rel=1e-12)
    assert cumulative_pop_hazard(rt, dem, 17.5, 17.5) == 0.0


def test_cumulative_piecewise_sum():
    # 1e-5/day for days 1..10 then 2e-5/day for days 11..15
    vals = np.full((2, 1, 2), 1e-5)
    vals[1] = 2e-5
    rt = RateTable(59, 2000, vals)
    # age chosen so the age-60 boundary falls exactly after day 10
    age_days = 60 * DAYS_PER_YEAR - 10
    dem = Demographics(age_days, "male", date(2000, 1, 1))
    got = cumulative_pop_hazard(rt, dem, 0, 15)
    assert got == pytest.approx(10 * 1e-5 + 5 * 2e-5, rel=1e-12)


def test_cumulative_additive_exact():
    rt = demo_ratetable()
    dem = Demographics(64.2 * DAYS_PER_YEAR, "female", date(1997, 3, 14))
    a = cumulative_pop_hazard(rt, dem, 0, 123.25)
    b = cumulative_pop_hazard(rt, dem, 123.25, 1000.75)
    whole = cumulative_pop_hazard(rt, dem, 0, 1000.75)
    assert a + b == pytest.approx(whole, rel=0, abs=1e-15)


def test_monotone_in_qx():
    lo = constant_table(1e-5)
    hi = constant_table(2e-5)
    dem = Demographics(70 * DAYS_PER_YEAR, "male", date(2001, 7, 1))
    assert cumulative_pop_hazard(hi, dem, 5, 300) > cumulative_pop_hazard(lo, dem, 5, 300)


def test_fractional_day_integration():
    rt = constant_table(1e-4)
    dem = Demographics(40 * DAYS_PER_YEAR, "female", date(2005, 5, 5))
    assert cumulative_pop_hazard(rt, dem, 0.25, 0.75) == pytest.approx(0.5e-4, rel=1e-12)


def test_matrix_matches_scalar_lookup():
    rt = demo_ratetable()
    dems = [
        Demographics(58.7 * DAYS_PER_YEAR, "male", date(1992, 11, 3)),
        Demographics(71.05 * DAYS_PER_YEAR, "female", date(1999, 2, 28)),
        Demographics(109.5 * DAYS_PER_YEAR, "male", date(2014, 12, 31)),
    ]
    age = np.array([d.age_at_origin for d in dems])
    sex = np.array([d.sex_idx for d in dems])
    origin = np.array([d.origin_epoch_day for d in dems], dtype=np.int64)
    mat = daily_hazard_matrix(rt, age, sex, origin, 800, chunk=2)
    for i, dem in enumerate(dems):
        for t in (0, 1, 399, 799):
            assert mat[i, t] == individual_hazard(rt, dem, t)
        assert np.array_equal(mat[i], daily_hazard_vector(rt, dem, 800))
