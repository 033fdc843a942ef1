"""Long-format event-history data with demographics.

One row per subject and possible transition: while a subject occupies a
state, they carry one record for every transition leaving it, all
sharing the same entry and exit times; ``status`` is 1 on the record of
the transition that actually happened, 0 elsewhere.  Times are days
since each subject's own origin.  A subject is at risk for a record
over the half-open interval ``(t_start, t_stop]`` (left-continuous
at-risk convention), which makes delayed entry (left truncation) well
defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from .model import TransitionModel
from .ratetable import DAYS_PER_YEAR, Demographics, _sex_index


class DataValidationError(ValueError):
    """Inconsistent or malformed event-history input."""


@dataclass(frozen=True)
class TransRecord:
    """One subject-transition interval."""

    subject_id: str
    trans_id: int
    t_start: float
    t_stop: float
    status: int


class EventDataset:
    """Validated event histories bound to a :class:`TransitionModel`.

    Internally stores flat numpy arrays; immutable after construction
    and safe to share between workers.
    """

    def __init__(
        self,
        model: TransitionModel,
        subject_ids: list[str],
        demographics: list[Demographics],
        trans_id: np.ndarray,
        subj_idx: np.ndarray,
        t_start: np.ndarray,
        t_stop: np.ndarray,
        status: np.ndarray,
    ):
        if len(subject_ids) != len(demographics):
            raise DataValidationError("one Demographics per subject required")
        self.model = model
        self.subject_ids = list(subject_ids)
        self.demographics = list(demographics)
        self.trans_id = np.asarray(trans_id, dtype=np.int64)
        self.subj_idx = np.asarray(subj_idx, dtype=np.int64)
        self.t_start = np.asarray(t_start, dtype=float)
        self.t_stop = np.asarray(t_stop, dtype=float)
        self.status = np.asarray(status, dtype=np.int64)
        self._validate()
        self._index()

    # -- construction -------------------------------------------------

    @classmethod
    def from_records(
        cls,
        model: TransitionModel,
        records: list[TransRecord],
        demographics: dict[str, Demographics],
    ) -> "EventDataset":
        order: dict[str, int] = {}
        for r in records:
            order.setdefault(r.subject_id, len(order))
        missing = [s for s in order if s not in demographics]
        if missing:
            raise DataValidationError(f"missing demographics for subjects {missing}")
        ids = list(order)
        return cls(
            model,
            ids,
            [demographics[s] for s in ids],
            np.array([r.trans_id for r in records]),
            np.array([order[r.subject_id] for r in records]),
            np.array([r.t_start for r in records], dtype=float),
            np.array([r.t_stop for r in records], dtype=float),
            np.array([r.status for r in records]),
        )

    # -- validation ----------------------------------------------------

    def _validate(self) -> None:
        m = self.model
        known = {t.trans_id for t in m.transitions}
        bad = set(np.unique(self.trans_id)) - known
        if bad:
            raise DataValidationError(f"unknown transition ids {sorted(bad)}")
        if np.any(self.t_start < 0):
            raise DataValidationError("negative entry times")
        if np.any(self.t_stop <= self.t_start):
            i = int(np.argmax(self.t_stop <= self.t_start))
            raise DataValidationError(
                f"subject {self.subject_ids[self.subj_idx[i]]}: record interval "
                f"({self.t_start[i]}, {self.t_stop[i]}] is empty"
            )
        if not np.all(np.isin(self.status, (0, 1))):
            raise DataValidationError("status must be 0 or 1")

        from_state = np.array([m.transition(t).from_state for t in self.trans_id])
        to_state = np.array([m.transition(t).to_state for t in self.trans_id])

        for s in range(len(self.subject_ids)):
            rows = np.flatnonzero(self.subj_idx == s)
            self._validate_subject(s, rows, from_state[rows], to_state[rows])

    def _validate_subject(self, s, rows, from_state, to_state) -> None:
        sid = self.subject_ids[s]
        starts = self.t_start[rows]
        stops = self.t_stop[rows]
        stats = self.status[rows]

        # Visits: records sharing (source state, entry time).  Competing
        # records of a visit must share the exit time (shared censoring)
        # and carry at most one event.
        visits: dict[tuple[int, float], list[int]] = {}
        for k in range(len(rows)):
            visits.setdefault((int(from_state[k]), float(starts[k])), []).append(k)
        intervals = []
        for (state, entry), ks in visits.items():
            exit_times = {float(stops[k]) for k in ks}
            if len(exit_times) > 1:
                raise DataValidationError(
                    f"subject {sid}: records out of state {state} entered at "
                    f"{entry} have different exit times {sorted(exit_times)}"
                )
            if sum(int(stats[k]) for k in ks) > 1:
                raise DataValidationError(
                    f"subject {sid}: more than one event out of state {state} "
                    f"at time {exit_times.pop()}"
                )
            intervals.append((entry, float(stops[ks[0]]), state, ks))

        # A subject occupies one state at a time.
        intervals.sort()
        for (e1, x1, st1, _), (e2, _, st2, _) in zip(intervals, intervals[1:]):
            if e2 < x1:
                raise DataValidationError(
                    f"subject {sid}: overlapping occupancy of states {st1} and {st2}"
                )

        # Each non-initial visit must be entered by an observed event.
        event_arrivals = {
            (int(to_state[k]), float(stops[k]))
            for k in range(len(rows))
            if stats[k] == 1
        }
        first_entry = min(e for e, _, _, _ in intervals)
        for entry, _, state, _ in intervals:
            if entry == first_entry and (state, entry) not in event_arrivals:
                continue  # external entry (origin or left truncation)
            if (state, entry) not in event_arrivals:
                raise DataValidationError(
                    f"subject {sid}: enters state {state} at {entry} without a "
                    f"recorded transition into it"
                )

    # -- indexing ------------------------------------------------------

    def _index(self) -> None:
        """Per-state visit arrays and per-transition event arrays."""
        m = self.model
        from_state = np.array([m.transition(t).from_state for t in self.trans_id])
        self._visits: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for h in range(1, m.n_states + 1):
            if m.absorbing[h - 1]:
                continue
            rows = np.flatnonzero(from_state == h)
            if len(rows) == 0:
                self._visits[h] = (
                    np.empty(0, dtype=np.int64),
                    np.empty(0),
                    np.empty(0),
                )
                continue
            key = np.stack(
                [self.subj_idx[rows], self.t_start[rows], self.t_stop[rows]]
            )
            _, uniq = np.unique(key, axis=1, return_index=True)
            rows = rows[np.sort(uniq)]
            self._visits[h] = (
                self.subj_idx[rows],
                self.t_start[rows],
                self.t_stop[rows],
            )

        self._events: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for t in m.transitions:
            rows = np.flatnonzero((self.trans_id == t.trans_id) & (self.status == 1))
            order = np.argsort(self.t_stop[rows], kind="stable")
            rows = rows[order]
            self._events[t.trans_id] = (self.subj_idx[rows], self.t_stop[rows])

    # -- accessors -----------------------------------------------------

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def horizon(self) -> float:
        """Largest exit time in the data."""
        return float(self.t_stop.max()) if len(self.t_stop) else 0.0

    def state_visits(self, state: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(subject index, entry, exit) arrays of the visits to ``state``."""
        return self._visits[state]

    def transition_events(self, trans_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(subject index, time) arrays of the observed events, time-sorted."""
        return self._events[trans_id]

    def demographics_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(age_days, sex_idx, origin_epoch_day) arrays over subjects."""
        age = np.array([d.age_at_origin for d in self.demographics], dtype=float)
        sex = np.array([d.sex_idx for d in self.demographics], dtype=np.int64)
        origin = np.array(
            [d.origin_epoch_day for d in self.demographics], dtype=np.int64
        )
        return age, sex, origin

    def subset(self, subj_indices: np.ndarray) -> "EventDataset":
        """Dataset made of the given subjects (repeats allowed), with
        trajectories and demographics moving together."""
        rows = []
        new_subj = []
        for new_i, i in enumerate(subj_indices):
            r = np.flatnonzero(self.subj_idx == i)
            rows.append(r)
            new_subj.append(np.full(len(r), new_i, dtype=np.int64))
        rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        new_subj = np.concatenate(new_subj) if new_subj else np.empty(0, dtype=np.int64)
        return EventDataset(
            self.model,
            [f"{self.subject_ids[i]}#{k}" for k, i in enumerate(subj_indices)],
            [self.demographics[i] for i in subj_indices],
            self.trans_id[rows],
            new_subj,
            self.t_start[rows],
            self.t_stop[rows],
            self.status[rows],
        )


def risk_set_size(dataset: EventDataset, state: int, t: float) -> int:
    """Number of subjects in ``state`` just before time ``t``.

    Counts visits with ``t_start < t <= t_stop``, so a subject whose
    interval ends exactly at ``t`` is still at risk there, and one
    entering exactly at ``t`` is not yet.
    """
    _, a, b = dataset.state_visits(state)
    return int(np.count_nonzero((a < t) & (t <= b)))


def load_dataset(
    path: str | Path,
    model: TransitionModel,
    age_unit: str = "days",
    sex_map: dict | None = None,
) -> EventDataset:
    """Read a long-format CSV with columns
    ``id, trans, Tstart, Tstop, status, age, sex, date``.

    ``age`` is the age at origin (in ``age_unit``: "days" or "years"),
    ``sex`` is M/F or 1/2 (or a custom ``sex_map`` to male/female), and
    ``date`` is the ISO-8601 calendar date at origin.
    """
    path = Path(path)
    df = pd.read_csv(path)
    required = ["id", "trans", "Tstart", "Tstop", "status", "age", "sex", "date"]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataValidationError(f"{path}: missing columns {missing}")
    if age_unit not in ("days", "years"):
        raise ValueError("age_unit must be 'days' or 'years'")

    ids_in_order: dict[str, int] = {}
    for v in df["id"].astype(str):
        ids_in_order.setdefault(v, len(ids_in_order))
    subj_idx = df["id"].astype(str).map(ids_in_order).to_numpy()

    demographics: list[Demographics] = [None] * len(ids_in_order)  # type: ignore
    sub = df.drop_duplicates("id")
    if len(sub) != len(ids_in_order):  # pragma: no cover - drop_duplicates keeps first
        raise DataValidationError("internal: duplicate ids")
    per_id = df.groupby("id", sort=False)[["age", "sex", "date"]].nunique()
    inconsistent = per_id[(per_id > 1).any(axis=1)].index.tolist()
    if inconsistent:
        raise DataValidationError(
            f"{path}: subjects with conflicting demographics: {inconsistent}"
        )
    for _, row in sub.iterrows():
        age = float(row["age"])
        if age_unit == "years":
            age *= DAYS_PER_YEAR
        sex = str(row["sex"]).strip()
        if sex_map:
            sex = sex_map.get(sex, sex)
        try:
            d = datetime.strptime(str(row["date"]), "%Y-%m-%d").date()
        except ValueError as exc:
            raise DataValidationError(
                f"{path}: subject {row['id']}: bad date {row['date']!r} "
                f"(expected YYYY-MM-DD)"
            ) from exc
        try:
            dem = Demographics(age, "male" if _sex_index(sex) == 0 else "female", d)
        except ValueError as exc:
            raise DataValidationError(
                f"{path}: subject {row['id']}: {exc}"
            ) from exc
        demographics[ids_in_order[str(row["id"])]] = dem

    return EventDataset(
        model,
        list(ids_in_order),
        demographics,
        df["trans"].to_numpy(np.int64),
        subj_idx,
        df["Tstart"].to_numpy(float),
        df["Tstop"].to_numpy(float),
        df["status"].to_numpy(np.int64),
    )


def write_dataset(dataset: EventDataset, path: str | Path) -> None:
    """Write a dataset back to the long-format CSV schema."""
    dem = dataset.demographics
    rows = {
        "id": [dataset.subject_ids[i] for i in dataset.subj_idx],
        "trans": dataset.trans_id,
        "Tstart": dataset.t_start,
        "Tstop": dataset.t_stop,
        "status": dataset.status,
        "age": [dem[i].age_at_origin for i in dataset.subj_idx],
        "sex": ["M" if dem[i].sex_idx == 0 else "F" for i in dataset.subj_idx],
        "date": [dem[i].date_at_origin.isoformat() for i in dataset.subj_idx],
    }
    pd.DataFrame(rows).to_csv(path, index=False)
