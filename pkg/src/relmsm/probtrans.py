"""Transition probability matrices by product integration.

P(s, t) is estimated as the finite product over grid times u in (s, t]
of (I + dLambda(u)), where the increment matrix collects the hazard
increments of every transition of the extended model (split parents are
replaced by their excess and population halves) and each diagonal entry
is one minus its row sum, so the factors are exactly row stochastic.

Jump transitions contribute at their event times.  Population parts
accrue on the daily grid; their mass between consecutive grid times is
folded into the factor at the right endpoint.  Within a split pair the
fold cancels against the excess part, so the total outflow of a state
never exceeds the observed one.  Negative excess increments can push
excess-state probabilities below zero; such entries are flagged, never
clipped.

The pointwise covariance of all matrix entries follows the classical
recursion for product integrals: propagate the previous covariance
through the current factor and add the covariance the factor's own
increments inject.  Increment covariances are Greenwood style,

    Var(dL_hj)        = dN_hj (Y_h - dN_hj) / Y_h^3
    Cov(dL_hj, dL_hl) = -dN_hj dN_hl / Y_h^3      (j != l),

with population increments treated as fixed (variance zero), matching
the closed-form option for the hazards.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .hazards import CumHazEstimate, EstimationError
from .model import TransitionModel


class NegativeProbabilityWarning(UserWarning):
    """A transition probability drifted below zero (negative excess
    hazard increments); reported unclipped."""


@dataclass
class ProbTransEstimate:
    """Time-indexed transition probability matrices from time ``s``.

    ``probs[k]`` is the row-stochastic matrix P(s, times[k]) on the
    extended state space.  ``covariance[k]``, when present, holds
    Cov(P[a, j], P[b, l]) indexed ``[a, j, b, l]``.
    """

    s: float
    times: np.ndarray
    probs: np.ndarray                     # (m, K, K)
    state_names: tuple[str, ...]
    covariance: np.ndarray | None = None  # (m, K, K, K, K)
    has_negative: bool = False

    @property
    def n_states(self) -> int:
        return self.probs.shape[1]

    def matrix_at(self, t) -> np.ndarray:
        """P(s, t) by last-value-carried-forward (identity before the
        first grid time)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.searchsorted(self.times, t, side="right") - 1
        k = self.n_states
        out = np.empty((len(t), k, k))
        for i, j in enumerate(idx):
            out[i] = np.eye(k) if j < 0 else self.probs[j]
        return out

    def prob_series(self, from_state: int, to_state: int) -> np.ndarray:
        """P_{from,to}(s, times) for 1-based extended state numbers."""
        return self.probs[:, from_state - 1, to_state - 1]

    def variance_series(self, from_state: int, to_state: int) -> np.ndarray:
        if self.covariance is None:
            raise EstimationError("estimate carries no covariance")
        a, j = from_state - 1, to_state - 1
        return self.covariance[:, a, j, a, j]


def _popcum_at(pop_cum: np.ndarray, day: int) -> float:
    if day <= 0 or len(pop_cum) == 0:
        return 0.0
    return float(pop_cum[min(day, len(pop_cum)) - 1])


def _build_grid(hazards, s, t_max, dense):
    event_times = [est.times for est in hazards.values() if len(est.times)]
    all_events = (
        np.unique(np.concatenate(event_times)) if event_times else np.empty(0)
    )
    if t_max is None:
        horizon = all_events[-1] if len(all_events) else 0.0
        for est in hazards.values():
            if est.pop_daily_cum is not None:
                horizon = max(horizon, float(len(est.pop_daily_cum)))
        t_max = horizon
    if t_max < s:
        raise EstimationError(f"t_max={t_max} earlier than s={s}")
    grid = all_events[(all_events > s) & (all_events <= t_max)]
    if dense:
        days = np.arange(np.floor(s) + 1, np.floor(t_max) + 1)
        grid = np.unique(np.concatenate([grid, days[days > s]]))
    if len(grid) == 0 or grid[-1] < t_max:
        grid = np.append(grid, t_max)
    return grid, t_max


def aalen_johansen(
    hazards: dict[int, CumHazEstimate],
    model: TransitionModel,
    s: float = 0.0,
    t_max: float | None = None,
    dense: bool = False,
    cov: str = "none",
) -> ProbTransEstimate:
    """Product-integral estimate of P(s, t) on the extended model.

    ``hazards`` must contain one estimate per extended transition
    (keys are extended transition ids, as returned by
    :func:`relmsm.hazards.estimate_all`).  With ``cov="greenwood"``
    the full entry covariance is propagated alongside.
    """
    active = model.extended_transitions
    missing = [t.trans_id for t in active if t.trans_id not in hazards]
    if missing:
        raise EstimationError(f"hazard estimates missing for transitions {missing}")
    if cov not in ("none", "greenwood"):
        raise ValueError("cov must be 'none' or 'greenwood'")

    grid, t_max = _build_grid(hazards, s, t_max, dense)
    m, k = len(grid), model.n_ext_states

    # Per transition: jump sizes mapped onto the grid and, for split
    # halves, the running day index for folding population mass.
    jumps = np.zeros((len(active), m))
    pop_fold = np.zeros((len(active), m))
    endpoints = np.empty((len(active), 2), dtype=int)
    split_sign = np.zeros(len(active))  # +1 population, -1 excess, 0 plain
    risk_y = np.zeros((k, m))
    event_n = np.zeros((len(active), m))
    for a_idx, tr in enumerate(active):
        est = hazards[tr.trans_id]
        ext_from, ext_to = model.extended_endpoints(tr.trans_id)
        endpoints[a_idx] = (ext_from - 1, ext_to - 1)
        if est.kind in ("observed", "excess"):
            sizes = (
                est.jump_sizes
                if est.kind == "excess"
                else np.divide(
                    est.n_event,
                    est.n_risk,
                    out=np.zeros(len(est.times)),
                    where=est.n_risk > 0,
                )
            )
            sel = (est.times > s) & (est.times <= t_max)
            pos = np.searchsorted(grid, est.times[sel])
            jumps[a_idx, pos] = sizes[sel]
            event_n[a_idx, pos] = est.n_event[sel]
            risk_y[ext_from - 1, pos] = est.n_risk[sel]
        if est.kind in ("excess", "population"):
            pc = est.pop_daily_cum
            days = np.floor(grid).astype(int)
            prev = np.concatenate([[int(np.floor(s))], days[:-1]])
            vals = np.array([_popcum_at(pc, d) for d in days])
            prev_vals = np.array([_popcum_at(pc, d) for d in prev])
            pop_fold[a_idx] = vals - prev_vals
            split_sign[a_idx] = 1.0 if est.kind == "population" else -1.0

    increments = jumps + split_sign[:, None] * pop_fold

    probs = np.empty((m, k, k))
    p = np.eye(k)
    v = np.zeros((k, k, k, k)) if cov == "greenwood" else None
    covariance = np.empty((m, k, k, k, k)) if cov == "greenwood" else None

    for step in range(m):
        factor = np.eye(k)
        for a_idx in range(len(active)):
            inc = increments[a_idx, step]
            if inc != 0.0:
                f, t = endpoints[a_idx]
                factor[f, t] += inc
                factor[f, f] -= inc
        # within a split pair the population fold cancels against the
        # excess part, so only genuine jump mass can push a row sum past
        # one; tolerate cancellation roundoff
        if np.any(np.diag(factor) < -1e-9):
            bad = int(np.argmax(np.diag(factor) < -1e-9))
            raise EstimationError(
                f"increment row sum exceeds 1 for state "
                f"{model.ext_state_names[bad]} at t={grid[step]}"
            )
        if v is not None:
            c = _increment_cov(
                k, active, endpoints, event_n[:, step], risk_y[:, step]
            )
            term1 = np.einsum("apbq,pj,ql->ajbl", v, factor, factor, optimize=True)
            term2 = np.einsum("ah,bh,hjl->ajbl", p, p, c, optimize=True)
            v = term1 + term2
            covariance[step] = v
        p = p @ factor
        probs[step] = p

    has_negative = bool(np.any(probs < -1e-15))
    if has_negative:
        warnings.warn(
            "negative transition probabilities (negative excess hazard "
            "increments); reported unclipped",
            NegativeProbabilityWarning,
            stacklevel=2,
        )
    return ProbTransEstimate(
        s=s,
        times=grid,
        probs=probs,
        state_names=model.ext_state_names,
        covariance=covariance,
        has_negative=has_negative,
    )


def _increment_cov(k, active, endpoints, d_step, y_step):
    """Greenwood-style covariance tensor C[h, j, l] of one factor's
    entries; population increments are deterministic and rows of C sum
    to zero by construction of the diagonal."""
    c = np.zeros((k, k, k))
    by_state: dict[int, list[tuple[int, float]]] = {}
    for a_idx in range(len(active)):
        d = d_step[a_idx]
        if d > 0:
            f, t = endpoints[a_idx]
            by_state.setdefault(f, []).append((t, d))
    for h, lst in by_state.items():
        y = y_step[h]
        if y <= 0:
            continue
        for t1, d1 in lst:
            for t2, d2 in lst:
                if t1 == t2:
                    c[h, t1, t1] = d1 * (y - d1) / y**3
                else:
                    c[h, t1, t2] = -d1 * d2 / y**3
        targets = [t for t, _ in lst]
        c[h, h, targets] = -c[h, targets, :][:, targets].sum(axis=0)
        c[h, targets, h] = -c[h, targets, :][:, targets].sum(axis=1)
        c[h, h, h] = c[h, targets, :][:, targets].sum()
    return c


def greenwood_cov(
    hazards: dict[int, CumHazEstimate],
    model: TransitionModel,
    s: float = 0.0,
    t_max: float | None = None,
) -> np.ndarray:
    """Covariance series of all P(s, .) entries (see
    :func:`aalen_johansen` with ``cov="greenwood"``)."""
    return aalen_johansen(hazards, model, s=s, t_max=t_max, cov="greenwood").covariance


def probtrans_frame(est: ProbTransEstimate) -> pd.DataFrame:
    """Long-format table: time, from, to, probability, variance, flag."""
    m, k = est.probs.shape[:2]
    times = np.repeat(est.times, k * k)
    frm = np.tile(np.repeat(np.arange(1, k + 1), k), m)
    to = np.tile(np.arange(1, k + 1), m * k)
    prob = est.probs.reshape(-1)
    if est.covariance is not None:
        var = est.covariance[
            :, np.arange(k)[:, None], np.arange(k)[None, :],
            np.arange(k)[:, None], np.arange(k)[None, :],
        ].reshape(-1)
    else:
        var = np.full(m * k * k, np.nan)
    flag = np.where(prob < -1e-15, "negative", "")
    return pd.DataFrame(
        {
            "time": times,
            "from": frm,
            "to": to,
            "probability": prob,
            "variance": var,
            "flag": flag,
        }
    )
