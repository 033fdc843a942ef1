from datetime import date

import numpy as np
import pytest

from relmsm.data import (
    DataValidationError,
    EventDataset,
    TransRecord,
    load_dataset,
    risk_set_size,
    write_dataset,
)
from relmsm.model import illness_death_model
from relmsm.ratetable import DAYS_PER_YEAR, Demographics

from conftest import dem, illness_death_dataset, two_state_dataset


def test_relapse_trajectory_accepted():
    ds = illness_death_dataset([("relapse", 300.0, 900.0, 0)])
    # contributes to the Relapse risk set on (300, 900]
    assert risk_set_size(ds, 2, 300.0) == 0
    assert risk_set_size(ds, 2, 300.5) == 1
    assert risk_set_size(ds, 2, 900.0) == 1
    assert risk_set_size(ds, 2, 900.5) == 0


def test_empty_interval_rejected():
    with pytest.raises(DataValidationError, match="empty"):
        two_state_dataset([(100.0, 100.0, 0)])


def test_two_events_same_state_same_time_rejected():
    m = illness_death_model()
    records = [
        TransRecord("a", 1, 0.0, 50.0, 1),
        TransRecord("a", 2, 0.0, 50.0, 1),
    ]
    with pytest.raises(DataValidationError, match="more than one event"):
        EventDataset.from_records(m, records, {"a": dem()})


def test_unknown_transition_rejected():
    with pytest.raises(DataValidationError, match="unknown transition"):
        EventDataset.from_records(
            illness_death_model(),
            [TransRecord("a", 9, 0.0, 1.0, 0)],
            {"a": dem()},
        )


def test_shared_censoring_enforced():
    records = [
        TransRecord("a", 1, 0.0, 50.0, 0),
        TransRecord("a", 2, 0.0, 60.0, 0),
    ]
    with pytest.raises(DataValidationError, match="different exit times"):
        EventDataset.from_records(illness_death_model(), records, {"a": dem()})


def test_dangling_state_entry_rejected():
    # at risk in Relapse from 350 although the relapse happened at 300
    records = [
        TransRecord("a", 1, 0.0, 300.0, 1),
        TransRecord("a", 2, 0.0, 300.0, 0),
        TransRecord("a", 3, 350.0, 900.0, 0),
    ]
    with pytest.raises(DataValidationError, match="without a recorded transition"):
        EventDataset.from_records(illness_death_model(), records, {"a": dem()})


def test_left_truncated_entry_accepted():
    # delayed entry into the initial state is fine
    ds = two_state_dataset([(30.0, 400.0, 1)])
    assert risk_set_size(ds, 1, 30.0) == 0
    assert risk_set_size(ds, 1, 31.0) == 1


def test_overlapping_occupancy_rejected():
    records = [
        TransRecord("a", 1, 0.0, 300.0, 1),
        TransRecord("a", 2, 0.0, 300.0, 0),
        TransRecord("a", 3, 200.0, 900.0, 0),  # overlaps ARF interval
    ]
    with pytest.raises(DataValidationError):
        EventDataset.from_records(illness_death_model(), records, {"a": dem()})


def test_risk_set_boundary_convention():
    ds = two_state_dataset([(300.0, 0)])
    assert risk_set_size(ds, 1, 300.0) == 1
    assert risk_set_size(ds, 1, 300.5) == 0
    assert risk_set_size(ds, 1, 0.0) == 0  # not yet at risk at entry time


def test_risk_set_counts_oracle():
    ds = two_state_dataset([(0, 10, 0), (0, 20, 0), (5, 15, 0)])
    assert risk_set_size(ds, 1, 7.0) == 3
    assert risk_set_size(ds, 1, 12.0) == 2


def test_risk_set_empty_dataset():
    ds = two_state_dataset([])
    assert risk_set_size(ds, 1, 5.0) == 0


def test_occupancy_bounded_by_n():
    ds = illness_death_dataset(
        [("arf", 100.0, 0, 0), ("relapse", 40.0, 80.0, 1), ("arf", 60.0, 0, 1)]
    )
    for t in np.linspace(0.5, 120, 37):
        total = risk_set_size(ds, 1, t) + risk_set_size(ds, 2, t)
        assert total <= ds.n_subjects


def csv_text():
    return (
        "id,trans,Tstart,Tstop,status,age,sex,date\n"
        "1,1,0,300,1,21914.46,M,2000-01-01\n"
        "1,2,0,300,0,21914.46,M,2000-01-01\n"
        "1,3,300,900,0,21914.46,M,2000-01-01\n"
        "2,1,0,650,0,18262.05,F,1995-06-15\n"
        "2,2,0,650,0,18262.05,F,1995-06-15\n"
    )


def test_load_dataset_csv(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text(csv_text())
    ds = load_dataset(path, illness_death_model())
    assert ds.n_subjects == 2
    assert ds.subject_ids == ["1", "2"]
    assert ds.demographics[0].sex == "male"
    assert ds.demographics[1].sex == "female"
    assert ds.demographics[1].date_at_origin == date(1995, 6, 15)
    assert risk_set_size(ds, 2, 400.0) == 1


def test_load_dataset_age_years(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text(
        "id,trans,Tstart,Tstop,status,age,sex,date\n"
        "1,1,0,100,0,60,1,2000-01-01\n"
        "1,2,0,100,0,60,1,2000-01-01\n"
    )
    ds = load_dataset(path, illness_death_model(), age_unit="years")
    assert ds.demographics[0].age_at_origin == pytest.approx(60 * DAYS_PER_YEAR)
    assert ds.demographics[0].sex == "male"  # numeric code 1


def test_load_dataset_missing_column(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("id,trans,Tstart,Tstop,status,age,sex\n1,1,0,1,0,60,M\n")
    with pytest.raises(DataValidationError, match="missing columns"):
        load_dataset(path, illness_death_model())


def test_load_dataset_conflicting_demographics(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text(
        "id,trans,Tstart,Tstop,status,age,sex,date\n"
        "1,1,0,100,0,60,M,2000-01-01\n"
        "1,2,0,100,0,61,M,2000-01-01\n"
    )
    with pytest.raises(DataValidationError, match="conflicting demographics"):
        load_dataset(path, illness_death_model())


def test_write_read_round_trip(tmp_path):
    ds = illness_death_dataset(
        [("relapse", 300.0, 900.0, 0), ("arf", 650.0, 0, 1)],
        demographics=[
            Demographics(55.5 * DAYS_PER_YEAR, "male", date(1998, 3, 1)),
            Demographics(70.0 * DAYS_PER_YEAR, "female", date(2001, 12, 31)),
        ],
    )
    path = tmp_path / "round.csv"
    write_dataset(ds, path)
    back = load_dataset(path, ds.model)
    assert back.n_subjects == ds.n_subjects
    assert np.array_equal(back.t_stop, ds.t_stop)
    assert np.array_equal(back.status, ds.status)
    assert back.demographics[1].sex == "female"


def test_subset_duplicates_subjects():
    ds = illness_death_dataset([("relapse", 100.0, 400.0, 1), ("arf", 650.0, 0, 0)])
    sub = ds.subset(np.array([0, 0, 1]))
    assert sub.n_subjects == 3
    assert risk_set_size(sub, 2, 200.0) == 2
