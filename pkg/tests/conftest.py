"""Shared builders for micro datasets used across the test modules."""

from datetime import date

import numpy as np
import pytest

from relmsm.data import EventDataset, TransRecord
from relmsm.model import build_model, illness_death_model
from relmsm.ratetable import DAYS_PER_YEAR, Demographics, RateTable


def const_table(rate_per_day, min_age=0, max_age=110, min_year=1980, max_year=2020):
    shape = (max_age - min_age + 1, max_year - min_year + 1, 2)
    return RateTable(min_age, min_year, np.full(shape, float(rate_per_day)))


def zero_table():
    return const_table(0.0)


def dem(age_years=60.0, sex="male", origin=date(2000, 1, 1)):
    return Demographics(age_years * DAYS_PER_YEAR, sex, origin)


def two_state_model(split=False):
    return build_model(
        [("Alive", False), ("Dead", True)], [(1, 2)], split=(1,) if split else ()
    )


def two_state_dataset(subjects, split=False, demographics=None):
    """``subjects``: list of (stop, status) or (start, stop, status)."""
    model = two_state_model(split)
    records, dems = [], {}
    for i, spec in enumerate(subjects):
        start, stop, status = (0.0, *spec) if len(spec) == 2 else spec
        sid = f"s{i}"
        records.append(TransRecord(sid, 1, start, stop, status))
        dems[sid] = demographics[i] if demographics else dem()
    return EventDataset.from_records(model, records, dems)


def illness_death_dataset(subjects, demographics=None, split=True):
    """``subjects``: list of trajectory tuples
    ("arf", stop, status_relapse, status_nrm) or
    ("relapse", r, stop, status_death) for subjects entering Relapse at r.
    """
    model = illness_death_model() if split else illness_death_model().unsplit()
    records, dems = [], {}
    for i, spec in enumerate(subjects):
        sid = f"s{i}"
        if spec[0] == "arf":
            _, stop, srel, snrm = spec
            records.append(TransRecord(sid, 1, 0.0, stop, srel))
            records.append(TransRecord(sid, 2, 0.0, stop, snrm))
        elif spec[0] == "relapse":
            _, r, stop, sdeath = spec
            records.append(TransRecord(sid, 1, 0.0, r, 1))
            records.append(TransRecord(sid, 2, 0.0, r, 0))
            records.append(TransRecord(sid, 3, r, stop, sdeath))
        else:
            raise ValueError(spec)
        dems[sid] = demographics[i] if demographics else dem()
    return EventDataset.from_records(model, records, dems)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
