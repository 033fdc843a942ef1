"""Batched weighted re-estimation core.

Resampling subjects with replacement only changes the integer weight
each subject carries, so a whole bootstrap can reuse one set of
precomputed arrays: per-subject daily population hazards, sorted
risk-set entry/exit orders and event-time grids.  :class:`Design` binds
a dataset, model and rate table once; :meth:`Design.estimate` then
re-estimates every hazard curve and the transition probability row of a
starting state for a whole matrix of subject weights at a time.

Results are bit-identical to the plain estimators in
:mod:`relmsm.hazards` and :mod:`relmsm.probtrans` for unit weights
(verified in the test suite); the sequential product over the grid is
shared across replicates, vectorized over the batch dimension.
"""

from __future__ import annotations

import numpy as np

from .data import EventDataset
from .hazards import EstimationError
from .ratetable import RateTable, daily_hazard_matrix


class Design:
    """Precomputed arrays for weighted re-estimation.

    Parameters
    ----------
    dataset, ratetable
        The data and the population table (the table may be omitted for
        models without split transitions).
    s
        Conditioning time of the probability row.
    t_max
        Horizon; defaults to the data horizon.
    start_state
        Observed state whose probability row P(s, .) is propagated.
    """

    def __init__(
        self,
        dataset: EventDataset,
        ratetable: RateTable | None = None,
        s: float = 0.0,
        t_max: float | None = None,
        start_state: int = 1,
    ):
        model = dataset.model
        self.dataset = dataset
        self.model = model
        self.n = dataset.n_subjects
        self.s = float(s)
        self.t_max = float(t_max if t_max is not None else max(dataset.horizon, s))
        # Daily arrays span the full data so hazard curves stay exact even
        # when the probability horizon t_max is shorter.
        self.n_days = int(np.ceil(max(dataset.horizon, self.t_max)))
        self.k_ext = model.n_ext_states
        if start_state not in model.ext_of_state:
            raise EstimationError(f"state {start_state} has no extended image")
        self.start_ext = model.ext_of_state[start_state] - 1

        split_sources = {
            model.transition(tid).from_state for tid in model.split_map
        }
        if split_sources and ratetable is None:
            raise EstimationError("split transitions require a rate table")

        # Daily population hazards per subject, column d covering (d, d+1].
        if split_sources:
            age, sex, origin = dataset.demographics_arrays()
            self.pop = daily_hazard_matrix(ratetable, age, sex, origin, self.n_days)
        else:
            self.pop = None

        # Per transient state: visit rows and their sort orders.
        self.states: dict[int, dict] = {}
        for h in range(1, model.n_states + 1):
            if model.absorbing[h - 1]:
                continue
            subj, a, b = dataset.state_visits(h)
            ord_a = np.argsort(a, kind="stable")
            ord_b = np.argsort(b, kind="stable")
            st = {
                "subj": subj,
                "a_sorted": a[ord_a],
                "b_sorted": b[ord_b],
                "subj_a": subj[ord_a],
                "subj_b": subj[ord_b],
            }
            if h in split_sources:
                mask = np.zeros((self.n, self.n_days))
                lo = np.minimum(np.floor(a).astype(int), self.n_days)
                hi = np.minimum(np.floor(b).astype(int), self.n_days)
                for i, l, r in zip(subj, lo, hi):
                    mask[i, l:r] += self.pop[i, l:r]
                st["pop_masked"] = mask
                days = np.arange(1, self.n_days + 1, dtype=float)
                st["day_pos_a"] = np.searchsorted(st["a_sorted"], days, side="left")
                st["day_pos_b"] = np.searchsorted(st["b_sorted"], days, side="left")
            self.states[h] = st

        # Jump-feeding observed transitions: each non-split transition, and
        # each split parent (whose events drive the excess half).
        self.jump_trans: dict[int, dict] = {}
        for tr in model.transitions:
            ev_subj, ev_time = dataset.transition_events(tr.trans_id)
            grid, inverse = (
                np.unique(ev_time, return_inverse=True)
                if len(ev_time)
                else (np.empty(0), np.empty(0, dtype=int))
            )
            st = self.states[tr.from_state]
            counts = np.bincount(inverse, minlength=len(grid)).astype(float)
            self.jump_trans[tr.trans_id] = {
                "from_state": tr.from_state,
                "grid": grid,
                "ev_subj": ev_subj,
                "ev_pos": inverse,
                "unique_events": bool(np.all(counts <= 1)) if len(grid) else True,
                "pos_a": np.searchsorted(st["a_sorted"], grid, side="left"),
                "pos_b": np.searchsorted(st["b_sorted"], grid, side="left"),
            }

        # Common probability grid over (s, t_max].
        event_times = [j["grid"] for j in self.jump_trans.values()]
        allev = np.unique(np.concatenate(event_times)) if event_times else np.empty(0)
        grid = allev[(allev > self.s) & (allev <= self.t_max)]
        if len(grid) == 0 or grid[-1] < self.t_max:
            grid = np.append(grid, self.t_max)
        self.prob_grid = grid
        self.day_idx = np.floor(grid).astype(int)
        self.prev_day_idx = np.concatenate([[int(np.floor(self.s))], self.day_idx[:-1]])
        for tid, j in self.jump_trans.items():
            sel = (j["grid"] > self.s) & (j["grid"] <= self.t_max)
            j["grid_sel"] = sel
            j["prob_pos"] = np.searchsorted(self.prob_grid, j["grid"][sel])

        # Active extended transitions in propagation order.
        self.active: list[dict] = []
        for tr in model.extended_transitions:
            ext_from, ext_to = model.extended_endpoints(tr.trans_id)
            parent = tr.parent_id if tr.parent_id is not None else tr.trans_id
            self.active.append(
                {
                    "ext_id": tr.trans_id,
                    "kind": tr.kind,
                    "parent": parent,
                    "from_state": tr.from_state,
                    "f": ext_from - 1,
                    "t": ext_to - 1,
                }
            )

    # -- weighted estimation -------------------------------------------

    def estimate(self, weights: np.ndarray | None = None) -> "EngineEstimate":
        """Hazard curves and the probability row for each weight vector.

        ``weights`` has shape (B, n_subjects); ``None`` means the
        original sample (a single row of ones).
        """
        w = (
            np.ones((1, self.n))
            if weights is None
            else np.asarray(weights, dtype=float)
        )
        b = w.shape[0]

        # Risk sets and event counts per jump transition.
        jump_inc: dict[int, np.ndarray] = {}
        jump_dn: dict[int, np.ndarray] = {}
        jump_y: dict[int, np.ndarray] = {}
        for tid, j in self.jump_trans.items():
            st = self.states[j["from_state"]]
            m = len(j["grid"])
            dn = np.zeros((b, m))
            if m:
                if j["unique_events"]:
                    dn[:, j["ev_pos"]] = w[:, j["ev_subj"]]
                else:
                    np.add.at(
                        dn,
                        (np.arange(b)[:, None], j["ev_pos"][None, :]),
                        w[:, j["ev_subj"]],
                    )
            y = self._risk_at(w, st, j["pos_a"], j["pos_b"])
            with np.errstate(invalid="ignore", divide="ignore"):
                inc = np.where(dn > 0, dn / y, 0.0)
            jump_inc[tid], jump_dn[tid], jump_y[tid] = inc, dn, y

        # Population accumulation per split-source state.
        pop_cum: dict[int, np.ndarray] = {}
        for h, st in self.states.items():
            if "pop_masked" not in st:
                continue
            num = w @ st["pop_masked"]
            yd = self._risk_at(w, st, st["day_pos_a"], st["day_pos_b"])
            inc = np.divide(num, yd, out=np.zeros_like(num), where=yd > 0)
            pop_cum[h] = np.concatenate(
                [np.zeros((b, 1)), np.cumsum(inc, axis=1)], axis=1
            )

        # Hazard curves per extended transition.
        hazard_grids: dict[int, np.ndarray] = {}
        hazard_curves: dict[int, np.ndarray] = {}
        for tr in self.active:
            tid, parent = tr["ext_id"], tr["parent"]
            grid = self.jump_trans[parent]["grid"]
            na = np.cumsum(jump_inc[parent], axis=1)
            if tr["kind"] == "observed":
                curve = na
            else:
                at_days = pop_cum[tr["from_state"]][
                    :, np.clip(np.floor(grid).astype(int), 0, self.n_days)
                ]
                curve = at_days if tr["kind"] == "population" else na - at_days
            hazard_grids[tid] = grid
            hazard_curves[tid] = curve

        # State ever occupied per replicate (targets of unoccupied source
        # states are reported missing).
        occupied: dict[int, np.ndarray] = {}
        for h, st in self.states.items():
            occupied[h] = (
                w[:, st["subj"]].sum(axis=1) > 0
                if len(st["subj"])
                else np.zeros(b, dtype=bool)
            )

        # Probability row propagation over the common grid.
        m = len(self.prob_grid)
        incs = np.zeros((len(self.active), b, m))
        for a_idx, tr in enumerate(self.active):
            j = self.jump_trans[tr["parent"]]
            if tr["kind"] != "population":
                incs[a_idx, :, j["prob_pos"]] = jump_inc[tr["parent"]][
                    :, j["grid_sel"]
                ].T
            if tr["kind"] in ("excess", "population"):
                pc = pop_cum[tr["from_state"]]
                fold = pc[:, self.day_idx] - pc[:, self.prev_day_idx]
                if tr["kind"] == "population":
                    incs[a_idx] += fold
                else:
                    incs[a_idx] -= fold

        probs = np.empty((b, m, self.k_ext))
        p = np.zeros((b, self.k_ext))
        p[:, self.start_ext] = 1.0
        frm = [tr["f"] for tr in self.active]
        to = [tr["t"] for tr in self.active]
        for step in range(m):
            p_new = p.copy()
            for a_idx in range(len(self.active)):
                flow = p[:, frm[a_idx]] * incs[a_idx, :, step]
                p_new[:, to[a_idx]] += flow
                p_new[:, frm[a_idx]] -= flow
            p = p_new
            probs[:, step, :] = p

        return EngineEstimate(
            design=self,
            weights=w,
            hazard_grids=hazard_grids,
            hazard_curves=hazard_curves,
            prob_grid=self.prob_grid,
            probs=probs,
            occupied=occupied,
            _jump_dn=jump_dn,
            _jump_y=jump_y,
            _incs=incs,
        )

    @staticmethod
    def _risk_at(w, st, pos_a, pos_b):
        cum_a = np.concatenate(
            [np.zeros((w.shape[0], 1)), np.cumsum(w[:, st["subj_a"]], axis=1)], axis=1
        )
        cum_b = np.concatenate(
            [np.zeros((w.shape[0], 1)), np.cumsum(w[:, st["subj_b"]], axis=1)], axis=1
        )
        return cum_a[:, pos_a] - cum_b[:, pos_b]

    # -- Greenwood variances (original sample) --------------------------

    def greenwood(self, est: "EngineEstimate") -> "GreenwoodResult":
        """Greenwood variance curves for the first weight row of ``est``.

        Hazard variances follow the usual cumulative formula (zero for
        population parts); probability variances follow the product
        recursion with population increments treated as deterministic.
        """
        hazard_var: dict[int, np.ndarray] = {}
        for tr in self.active:
            tid, parent = tr["ext_id"], tr["parent"]
            dn = est._jump_dn[parent][0]
            y = est._jump_y[parent][0]
            if tr["kind"] == "population":
                hazard_var[tid] = np.zeros(len(dn))
                continue
            denom = y * (y - dn)
            with np.errstate(divide="ignore", invalid="ignore"):
                inc = np.where(
                    dn > 0,
                    np.where(denom > 0, dn / np.where(denom > 0, denom, 1.0), np.inf),
                    0.0,
                )
            hazard_var[tid] = np.cumsum(inc)

        # Events and risk sets mapped onto the probability grid.
        k = self.k_ext
        m = len(self.prob_grid)
        dn_grid = np.zeros((len(self.active), m))
        y_grid = np.zeros((len(self.active), m))
        for a_idx, tr in enumerate(self.active):
            if tr["kind"] == "population":
                continue
            j = self.jump_trans[tr["parent"]]
            dn_grid[a_idx, j["prob_pos"]] = est._jump_dn[tr["parent"]][0, j["grid_sel"]]
            y_grid[a_idx, j["prob_pos"]] = est._jump_y[tr["parent"]][0, j["grid_sel"]]

        # Row covariance recursion: C <- F' C F + sum_h p_h^2 C_h.
        c = np.zeros((k, k))
        prob_var = np.empty((m, k))
        p = np.zeros(k)
        p[self.start_ext] = 1.0
        for step in range(m):
            factor = np.eye(k)
            by_state: dict[int, list[tuple[int, float, float]]] = {}
            for a_idx, tr in enumerate(self.active):
                inc = est._incs[a_idx, 0, step]
                if inc != 0.0:
                    factor[tr["f"], tr["t"]] += inc
                    factor[tr["f"], tr["f"]] -= inc
                dn = dn_grid[a_idx, step]
                if dn > 0:
                    by_state.setdefault(tr["f"], []).append(
                        (tr["t"], dn, y_grid[a_idx, step])
                    )
            c = factor.T @ c @ factor
            for h, lst in by_state.items():
                y = lst[0][2]
                ch = np.zeros((k, k))
                for t1, d1, _ in lst:
                    for t2, d2, _ in lst:
                        ch[t1, t2] = (
                            d1 * (y - d1) / y**3 if t1 == t2 else -d1 * d2 / y**3
                        )
                tgt = [t for t, _, _ in lst]
                ch[h, tgt] = -ch[np.ix_(tgt, tgt)].sum(axis=0)
                ch[tgt, h] = -ch[np.ix_(tgt, tgt)].sum(axis=1)
                ch[h, h] = ch[np.ix_(tgt, tgt)].sum()
                c += p[h] ** 2 * ch
            p = p @ factor
            prob_var[step] = np.diag(c)

        return GreenwoodResult(self, hazard_var=hazard_var, prob_var=prob_var)


class EngineEstimate:
    """Batched estimation output; see :meth:`Design.estimate`."""

    def __init__(
        self,
        design,
        weights,
        hazard_grids,
        hazard_curves,
        prob_grid,
        probs,
        occupied,
        _jump_dn,
        _jump_y,
        _incs,
    ):
        self.design = design
        self.weights = weights
        self.hazard_grids = hazard_grids
        self.hazard_curves = hazard_curves
        self.prob_grid = prob_grid
        self.probs = probs
        self.occupied = occupied
        self._jump_dn = _jump_dn
        self._jump_y = _jump_y
        self._incs = _incs

    def hazard_at(self, ext_id: int, times, missing_nan: bool = True) -> np.ndarray:
        """(B, len(times)) hazard values, LVCF; replicates that never
        occupy the source state are NaN when ``missing_nan``."""
        vals = _lvcf(self.hazard_grids[ext_id], self.hazard_curves[ext_id], times)
        if missing_nan:
            tr = next(t for t in self.design.active if t["ext_id"] == ext_id)
            vals = vals.copy()
            vals[~self.occupied[tr["from_state"]]] = np.nan
        return vals

    def prob_at(self, ext_state: int, times) -> np.ndarray:
        """(B, len(times)) occupancy probabilities of a 1-based extended
        state, LVCF from the starting row."""
        series = self.probs[:, :, ext_state - 1]
        start = 1.0 if ext_state - 1 == self.design.start_ext else 0.0
        return _lvcf(self.prob_grid, series, times, before=start)


class GreenwoodResult:
    """Greenwood variance curves of one estimation (original sample)."""

    def __init__(self, design, hazard_var, prob_var):
        self.design = design
        self.hazard_var = hazard_var
        self.prob_var = prob_var

    def hazard_var_at(self, ext_id, times):
        parent = next(
            t["parent"] for t in self.design.active if t["ext_id"] == ext_id
        )
        grid = self.design.jump_trans[parent]["grid"]
        return _lvcf(grid, self.hazard_var[ext_id][None, :], times)[0]

    def prob_var_at(self, ext_state, times):
        return _lvcf(
            self.design.prob_grid, self.prob_var[:, ext_state - 1][None, :], times
        )[0]


def _lvcf(grid, curves, times, before: float = 0.0) -> np.ndarray:
    """Step-function evaluation of (B, m) curves at arbitrary times."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    curves = np.atleast_2d(curves)
    idx = np.searchsorted(grid, times, side="right") - 1
    padded = np.concatenate(
        [np.full((curves.shape[0], 1), before), curves], axis=1
    )
    return padded[:, idx + 1]
