"""Cumulative transition hazard estimators.

For an observed transition h -> j the Nelson-Aalen estimator jumps by
dN_hj(u) / Y_h(u) at every event time u, where Y_h counts the subjects
in h just before u.  Its variance is estimated Greenwood style by
summing dN / (Y (Y - dN)).

A transition marked as split is divided into a population part, driven
by the rate table, and an excess part, their difference from the
observed hazard.  The population cumulative hazard is accumulated on a
grid of whole days,

    sum over days u of [ sum_i Y_hi(u) dLambda_Pi(u) ] / Y_h(u),

with each subject's dLambda_Pi taken from the table at their current
age and calendar date, so the estimate is continuous and piecewise
linear while the excess part jumps at event times and drifts between
them.  Both are reported at the event times of their parent transition
(constant in between); pass ``dense=True`` to also obtain the full
daily grid.  Excess increments may be negative; they are reported as
is, with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import EventDataset
from .model import TransitionModel
from .ratetable import RateTable, daily_hazard_matrix


class EstimationError(RuntimeError):
    """Numerically or structurally impossible estimation request."""


class NegativeExcessWarning(UserWarning):
    """Excess cumulative hazard decreased below zero somewhere.

    This happens when the study population outlives the general
    population; the additive hazard split is then questionable and the
    estimates need cautious interpretation."""


@dataclass
class CumHazEstimate:
    """A cumulative hazard curve with pointwise variance.

    ``times`` are the reporting times (event times of the transition,
    or of its parent for split estimates); the curve is constant
    between them.  ``variance`` is the Greenwood estimate, identically
    zero for population parts (the closed-form option treats the table
    as fixed) and may be +inf after a time where the full risk set had
    events.
    """

    trans_id: int
    kind: str  # observed | excess | population
    times: np.ndarray
    values: np.ndarray
    variance: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray
    parent_id: int | None = None
    daily_times: np.ndarray | None = None
    daily_values: np.ndarray | None = None
    # Cumulative population hazard per whole day (index d = through day d);
    # carried by split estimates so probability estimation can fold the
    # between-event mass exactly.
    pop_daily_cum: np.ndarray | None = field(default=None, repr=False)
    # Jump sizes of the parent Nelson-Aalen at `times` (excess kind only).
    jump_sizes: np.ndarray | None = field(default=None, repr=False)

    def value_at(self, t) -> np.ndarray:
        """Last-value-carried-forward evaluation at arbitrary times."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.concatenate([[0.0], self.values])
        return vals[idx + 1]

    def variance_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.concatenate([[0.0], self.variance])
        return vals[idx + 1]


def risk_set_at(dataset: EventDataset, state: int, times: np.ndarray) -> np.ndarray:
    """Y_state just before each of ``times`` (vectorized)."""
    _, a, b = dataset.state_visits(state)
    times = np.asarray(times, dtype=float)
    n_entered = np.searchsorted(np.sort(a), times, side="left")
    n_left = np.searchsorted(np.sort(b), times, side="left")
    return n_entered - n_left


def _event_grid(dataset: EventDataset, trans_id: int):
    """Unique event times with multiplicities and risk-set sizes."""
    t = dataset.model.transition(trans_id)
    if t.kind != "observed":
        raise EstimationError(f"transition {trans_id} is not an observed transition")
    _, times = dataset.transition_events(trans_id)
    if len(times) == 0:
        empty = np.empty(0)
        return empty, empty, empty
    utimes, counts = np.unique(times, return_counts=True)
    y = risk_set_at(dataset, t.from_state, utimes)
    if np.any(y < counts):
        bad = utimes[np.argmax(y < counts)]
        raise EstimationError(
            f"transition {trans_id}: event at t={bad} with insufficient risk set"
        )
    return utimes, counts.astype(float), y.astype(float)


def nelson_aalen(dataset: EventDataset, trans_id: int) -> CumHazEstimate:
    """Nelson-Aalen cumulative hazard with Greenwood variance."""
    times, d, y = _event_grid(dataset, trans_id)
    values = np.cumsum(d / y) if len(times) else np.empty(0)
    return CumHazEstimate(
        trans_id=trans_id,
        kind="observed",
        times=times,
        values=values,
        variance=greenwood_var(dataset, trans_id),
        n_risk=y,
        n_event=d,
    )


def greenwood_var(dataset: EventDataset, trans_id: int) -> np.ndarray:
    """Greenwood variance of the Nelson-Aalen estimator at its event times.

    A time where every subject at risk has the event makes the
    increment infinite; the variance is +inf from there on.
    """
    times, d, y = _event_grid(dataset, trans_id)
    if len(times) == 0:
        return np.empty(0)
    denom = y * (y - d)
    with np.errstate(divide="ignore"):
        inc = np.where(denom > 0, d / np.where(denom > 0, denom, 1.0), np.inf)
    return np.cumsum(inc)


def population_daily_cum(
    dataset: EventDataset,
    ratetable: RateTable,
    state: int,
    n_days: int | None = None,
) -> np.ndarray:
    """Cumulative population hazard of Eq-style risk-set averaging.

    Element d (0-based) is the estimate through whole day d+1; the
    increment of day u averages the at-risk subjects' table hazards
    over (u-1, u].  Days with an empty risk set contribute nothing.
    """
    subj, a, b = dataset.state_visits(state)
    if n_days is None:
        n_days = int(np.ceil(b.max())) if len(b) else 0
    if n_days == 0 or len(subj) == 0:
        return np.zeros(n_days)

    age, sex, origin = dataset.demographics_arrays()
    active = np.unique(subj)
    pop = np.zeros((dataset.n_subjects, n_days))
    pop[active] = daily_hazard_matrix(
        ratetable, age[active], sex[active], origin[active], n_days
    )

    num = np.zeros(n_days)
    y = np.zeros(n_days)
    for i, lo, hi in zip(subj, np.floor(a).astype(int), np.floor(b).astype(int)):
        lo, hi = min(lo, n_days), min(hi, n_days)
        num[lo:hi] += pop[i, lo:hi]
        y[lo:hi] += 1.0
    inc = np.divide(num, y, out=np.zeros(n_days), where=y > 0)
    return np.cumsum(inc)


def split_hazards(
    dataset: EventDataset,
    ratetable: RateTable,
    trans_id: int,
    dense: bool = False,
) -> tuple[CumHazEstimate, CumHazEstimate]:
    """Excess and population cumulative hazards of a split transition.

    Returns ``(excess, population)``; their sum reproduces the observed
    Nelson-Aalen estimate exactly at every reporting time.
    """
    model = dataset.model
    if not model.is_split(trans_id):
        raise EstimationError(f"transition {trans_id} is not split in the model")
    exc_id, pop_id = model.split_map[trans_id]
    parent = model.transition(trans_id)

    na = nelson_aalen(dataset, trans_id)
    pop_cum = population_daily_cum(dataset, ratetable, parent.from_state)
    pop_at = _days_value(pop_cum, na.times)
    exc_values = na.values - pop_at

    daily_t = daily_pop = daily_exc = None
    if dense:
        daily_t = np.arange(1, len(pop_cum) + 1, dtype=float)
        daily_pop = pop_cum.copy()
        daily_exc = na.value_at(daily_t) - pop_cum

    if np.any(exc_values < 0) or (dense and np.any(daily_exc < 0)):
        warnings.warn(
            f"transition {trans_id}: negative excess cumulative hazard "
            f"(population mortality exceeds observed); reported unclipped",
            NegativeExcessWarning,
            stacklevel=2,
        )

    excess = CumHazEstimate(
        trans_id=exc_id,
        kind="excess",
        times=na.times,
        values=exc_values,
        variance=na.variance.copy(),
        n_risk=na.n_risk,
        n_event=na.n_event,
        parent_id=trans_id,
        daily_times=daily_t,
        daily_values=daily_exc,
        pop_daily_cum=pop_cum,
        jump_sizes=(na.n_event / na.n_risk) if len(na.times) else np.empty(0),
    )
    population = CumHazEstimate(
        trans_id=pop_id,
        kind="population",
        times=na.times,
        values=pop_at,
        variance=np.zeros_like(pop_at),
        n_risk=na.n_risk,
        n_event=np.zeros_like(na.n_event),
        parent_id=trans_id,
        daily_times=daily_t,
        daily_values=daily_pop,
        pop_daily_cum=pop_cum,
    )
    return excess, population


def _days_value(pop_cum: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Value of a whole-day cumulative series at arbitrary times (the
    mass of all complete days up to floor(t))."""
    if len(times) == 0:
        return np.empty(0)
    idx = np.clip(np.floor(times).astype(int), 0, len(pop_cum))
    padded = np.concatenate([[0.0], pop_cum])
    return padded[idx]


def estimate_all(
    dataset: EventDataset,
    ratetable: RateTable | None = None,
    dense: bool = False,
) -> dict[int, CumHazEstimate]:
    """All extended-model hazards: Nelson-Aalen for non-split
    transitions, excess/population pairs for split ones.  Keys are the
    extended transition ids."""
    model = dataset.model
    if model.split_map and ratetable is None:
        raise EstimationError("model has split transitions but no rate table given")
    out: dict[int, CumHazEstimate] = {}
    for t in model.transitions:
        if model.is_split(t.trans_id):
            exc, pop = split_hazards(dataset, ratetable, t.trans_id, dense=dense)
            out[exc.trans_id] = exc
            out[pop.trans_id] = pop
        else:
            est = nelson_aalen(dataset, t.trans_id)
            if dense:
                days = np.arange(1, int(np.ceil(dataset.horizon)) + 1, dtype=float)
                est.daily_times = days
                est.daily_values = est.value_at(days)
            out[t.trans_id] = est
    return out


def hazards_frame(
    estimates: dict[int, CumHazEstimate], model: TransitionModel, dense: bool = False
) -> pd.DataFrame:
    """Long-format table of hazard estimates (time, value, variance, kind)."""
    rows = []
    for tid in sorted(estimates):
        est = estimates[tid]
        t = model.transition(tid)
        times, values = est.times, est.values
        variance = est.variance
        if dense and est.daily_times is not None:
            times, values = est.daily_times, est.daily_values
            variance = est.variance_at(times)
        for k in range(len(times)):
            rows.append(
                {
                    "trans": tid,
                    "from": t.from_state,
                    "to": t.to_state,
                    "kind": est.kind,
                    "time": times[k],
                    "value": values[k],
                    "variance": variance[k],
                }
            )
    return pd.DataFrame(
        rows, columns=["trans", "from", "to", "kind", "time", "value", "variance"]
    )
