"""Monte Carlo study harness for the split multi-state estimators.

Five built-in data-generating scenarios share the illness-death layout
(initial state, relapse, two death routes, each split into excess and
population parts): exponential or Weibull excess/relapse hazards, small
or large population-death share (steered through the age range), and
positive or negative age effects.  Population death times are drawn
from the rate table by inverse transform on each subject's daily
cumulative hazard; the death-after-relapse time is drawn conditional on
the relapse time so the latent process stays Markov.

True estimand values are computed by integrating over the covariate
distribution: by default with a large common-random-number Monte Carlo
sample of uncensored trajectories, optionally with deterministic
age/sex/date grid quadrature.  Replication-level performance follows
the usual reporting: relative bias, empirical standard error, mean
estimated standard errors, and coverage per interval method.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from datetime import date
from importlib import resources

import numpy as np
import pandas as pd

from .data import EventDataset
from .engine import Design
from .inference import CI_METHODS, bootstrap, confidence_interval, TargetEstimate
from .model import TransitionModel, illness_death_model
from .ratetable import DAYS_PER_YEAR, Demographics, RateTable, daily_hazard_matrix

SCENARIO_NAMES = ("exp.small", "exp.large", "weibull", "cov.eff.pos", "cov.eff.neg")

_EPOCH = date(1970, 1, 1)


class QuadratureError(RuntimeError):
    """True-value grid refinement did not reach the requested tolerance."""


@dataclass(frozen=True)
class HazardSpec:
    """Baseline hazard of one non-population transition.

    ``rate`` is the cumulative hazard per year at covariate midpoint
    (for Weibull, the rate parameter against time in years); ``shape``
    is the Weibull shape (1 = exponential); ``beta_age`` multiplies the
    hazard by exp(beta_age * (age - mean age)) with age in years.
    """

    rate: float
    shape: float = 1.0
    beta_age: float = 0.0

    def __post_init__(self):
        if self.rate <= 0 or self.shape <= 0:
            raise ValueError("rate and shape must be positive")

    def rel_risk(self, age_centered_years):
        return np.exp(self.beta_age * np.asarray(age_centered_years, dtype=float))

    def cumhaz0(self, t_days):
        """Baseline cumulative hazard at covariate midpoint."""
        return self.rate * (np.asarray(t_days, dtype=float) / DAYS_PER_YEAR) ** self.shape

    def inverse(self, exp_draws, rel_risk):
        """Event times (days) from Exp(1) draws."""
        return DAYS_PER_YEAR * (exp_draws / (self.rate * rel_risk)) ** (1 / self.shape)

    def inverse_truncated(self, exp_draws, r_days, rel_risk):
        """Left-truncated draw: event time conditional on survival to r."""
        ry = np.asarray(r_days, dtype=float) / DAYS_PER_YEAR
        return DAYS_PER_YEAR * (
            ry**self.shape + exp_draws / (self.rate * rel_risk)
        ) ** (1 / self.shape)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    n: int
    relapse: HazardSpec
    nrm_excess: HazardSpec
    dar_excess: HazardSpec
    age_range: tuple[float, float]          # years
    censoring_rate: float                   # per year
    n_sim: int = 200
    follow_up_years: float = 10.0
    origin_range: tuple[str, str] = ("1990-01-01", "2000-01-01")
    eval_years: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0)

    def __post_init__(self):
        if self.age_range[0] >= self.age_range[1]:
            raise ValueError("age_range must be increasing")
        if self.censoring_rate < 0:
            raise ValueError("censoring_rate must be >= 0")
        if self.name.startswith("cov.eff"):
            if self.relapse.beta_age == 0 and self.nrm_excess.beta_age == 0:
                raise ValueError("cov.eff scenarios need a nonzero age effect")
        else:
            for spec in (self.relapse, self.nrm_excess, self.dar_excess):
                if spec.beta_age != 0:
                    raise ValueError(
                        f"scenario {self.name} must not carry age effects"
                    )

    @property
    def tau_days(self) -> float:
        return self.follow_up_years * DAYS_PER_YEAR

    @property
    def eval_days(self) -> np.ndarray:
        return np.asarray(self.eval_years) * DAYS_PER_YEAR

    @property
    def mean_age(self) -> float:
        return 0.5 * (self.age_range[0] + self.age_range[1])

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("relapse", "nrm_excess", "dar_excess"):
            d[key] = HazardSpec(**d[key])
        d["age_range"] = tuple(d["age_range"])
        d["origin_range"] = tuple(d.get("origin_range", ("1990-01-01", "2000-01-01")))
        d["eval_years"] = tuple(d.get("eval_years", (1.0, 2.0, 5.0, 10.0)))
        return cls(**d)


def builtin_scenario(name: str, n: int = 2000, n_sim: int = 200) -> ScenarioConfig:
    """One of the five shipped scenarios, at the requested sample size."""
    ref = resources.files("relmsm.resources").joinpath("scenarios.json")
    cfgs = json.loads(ref.read_text())
    if name not in cfgs:
        raise KeyError(f"unknown scenario {name!r} (choose from {sorted(cfgs)})")
    d = cfgs[name]
    d["name"], d["n"], d["n_sim"] = name, n, n_sim
    return ScenarioConfig.from_json(d)


def load_scenario(path, n: int | None = None, n_sim: int | None = None) -> ScenarioConfig:
    with open(path) as fh:
        d = json.load(fh)
    if n is not None:
        d["n"] = n
    if n_sim is not None:
        d["n_sim"] = n_sim
    return ScenarioConfig.from_json(d)


# ---------------------------------------------------------------------------
# Samplers


def sample_weibull_left_truncated(a, b, r, rng, size=None):
    """Weibull event times conditional on exceeding ``r``.

    Inverts the conditional survival exp(-a (t^b - r^b)):
    T = (r^b - ln(U)/a)^(1/b), so T > r always; with b = 1 this is the
    memoryless r + Exp(a).  Time units follow the units of ``a``.
    """
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if np.any(np.asarray(r) < 0):
        raise ValueError("r must be >= 0")
    u = rng.uniform(size=size)
    return (np.asarray(r, dtype=float) ** b - np.log(u) / a) ** (1 / b)


def sample_population_death(
    dem: Demographics, table: RateTable, after: float, rng
) -> float:
    """Inverse-transform population death time for one individual.

    Returns the smallest t with Lambda(t) - Lambda(after) >= E,
    E ~ Exp(1), scanning the daily piecewise-constant hazard and solving
    exactly inside the crossing day.  Beyond the clamped table the
    hazard is constant, so the tail is solved analytically; a zero tail
    rate yields +inf.
    """
    if after < 0:
        raise ValueError("after must be >= 0")
    e = rng.exponential()
    # horizon after which both axes are clamped and the hazard constant
    to_max_age = max(0.0, (table.max_age + 1) * DAYS_PER_YEAR - dem.age_at_origin)
    to_max_year = max(
        0.0, (date(table.max_year + 1, 1, 1) - dem.date_at_origin).days
    )
    horizon = int(np.ceil(max(to_max_age, to_max_year, after))) + 1
    haz = daily_hazard_matrix(
        table,
        np.array([dem.age_at_origin]),
        np.array([dem.sex_idx]),
        np.array([dem.origin_epoch_day], dtype=np.int64),
        horizon,
    )[0]
    cum = np.concatenate([[0.0], np.cumsum(haz)])
    fa = int(after)
    base = cum[fa] + (after - fa) * haz[fa] if after < horizon else cum[-1]
    thr = base + e
    d = int(np.searchsorted(cum, thr, side="left")) - 1
    if d < len(haz):
        return d + (thr - cum[d]) / haz[d]
    tail_rate = haz[-1]
    if tail_rate == 0.0:
        return np.inf
    return horizon + (thr - cum[-1]) / tail_rate


def _crossing_times(cum, haz, thresholds):
    """Vectorized first-crossing of per-row cumulative hazards.

    ``cum[i, d]`` is the cumulative hazard through day d+1; rows that
    never reach their threshold give +inf.
    """
    n, n_days = haz.shape
    idx = (cum < thresholds[:, None]).sum(axis=1)
    crossed = idx < n_days
    i = np.where(crossed, idx, 0)
    prev = np.where(i > 0, cum[np.arange(n), i - 1], 0.0)
    rate = haz[np.arange(n), i]
    t = np.full(n, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t[crossed] = (i + (thresholds - prev) / rate)[crossed]
    return t


def _cum_at(cum, haz, t):
    """Piecewise-linear cumulative hazard at arbitrary times, per row."""
    n = haz.shape[0]
    d = np.minimum(t.astype(int), haz.shape[1] - 1)
    prev = np.where(d > 0, cum[np.arange(n), d - 1], 0.0)
    return prev + (t - d) * haz[np.arange(n), d]


@dataclass
class LatentTrajectories:
    """Uncensored event times of one simulated cohort (days)."""

    age_days: np.ndarray
    sex_idx: np.ndarray
    origin_day: np.ndarray
    t_relapse: np.ndarray
    t_nrm_excess: np.ndarray
    t_nrm_pop: np.ndarray
    t_dar_excess: np.ndarray   # conditional on the relapse time
    t_dar_pop: np.ndarray
    relapse_first: np.ndarray  # bool

    @property
    def t_first(self):
        return np.minimum(
            self.t_relapse, np.minimum(self.t_nrm_excess, self.t_nrm_pop)
        )

    @property
    def t_death_after_relapse(self):
        return np.minimum(self.t_dar_excess, self.t_dar_pop)


def _draw_demographics(config: ScenarioConfig, rng, n: int):
    age_years = rng.uniform(*config.age_range, n)
    sex_idx = (rng.uniform(size=n) < 0.5).astype(np.int64)
    d0 = (date.fromisoformat(config.origin_range[0]) - _EPOCH).days
    d1 = (date.fromisoformat(config.origin_range[1]) - _EPOCH).days
    origin_day = rng.integers(d0, d1, n)
    return age_years * DAYS_PER_YEAR, sex_idx, origin_day


def _draw_latent(config: ScenarioConfig, table: RateTable, rng, n: int):
    """Demographics plus all latent event times, without censoring."""
    age_days, sex_idx, origin_day = _draw_demographics(config, rng, n)
    n_days = int(np.ceil(config.tau_days))
    pop = daily_hazard_matrix(table, age_days, sex_idx, origin_day, n_days)
    cum = np.cumsum(pop, axis=1)
    age_c = age_days / DAYS_PER_YEAR - config.mean_age

    rr_rel = config.relapse.rel_risk(age_c)
    rr_ne = config.nrm_excess.rel_risk(age_c)
    rr_de = config.dar_excess.rel_risk(age_c)

    t_rel = config.relapse.inverse(rng.exponential(size=n), rr_rel)
    t_ne = config.nrm_excess.inverse(rng.exponential(size=n), rr_ne)
    t_np = _crossing_times(cum, pop, rng.exponential(size=n))

    t_first = np.minimum(t_rel, np.minimum(t_ne, t_np))
    relapse_first = t_rel <= t_first

    # conditional times after relapse (drawn for everyone, used only when
    # the relapse came first; Markov: hazards depend on absolute time)
    t_de = config.dar_excess.inverse_truncated(
        rng.exponential(size=n), t_rel, rr_de
    )
    thr = _cum_at(cum, pop, np.minimum(t_rel, n_days - 1e-9)) + rng.exponential(size=n)
    t_dp = _crossing_times(cum, pop, thr)

    traj = LatentTrajectories(
        age_days, sex_idx, origin_day, t_rel, t_ne, t_np, t_de, t_dp, relapse_first
    )
    return traj, pop, cum


def generate_dataset(
    config: ScenarioConfig,
    table: RateTable,
    rng,
    n: int | None = None,
    model: TransitionModel | None = None,
) -> EventDataset:
    """One simulated cohort in long format, censored and truncated at
    the follow-up horizon."""
    n = config.n if n is None else n
    model = illness_death_model() if model is None else model
    traj, _, _ = _draw_latent(config, table, rng, n)
    if config.censoring_rate > 0:
        cens = rng.exponential(1 / config.censoring_rate, n) * DAYS_PER_YEAR
    else:
        cens = np.full(n, np.inf)
    cens = np.minimum(cens, config.tau_days)

    t_first = traj.t_first
    relapse_obs = traj.relapse_first & (traj.t_relapse < cens)
    nrm_obs = ~traj.relapse_first & (t_first < cens)
    arf_end = np.minimum(t_first, cens)

    rec_trans, rec_subj, rec_start, rec_stop, rec_status = [], [], [], [], []
    idx = np.arange(n)
    rec_trans.append(np.full(n, 1))
    rec_subj.append(idx)
    rec_start.append(np.zeros(n))
    rec_stop.append(arf_end)
    rec_status.append(relapse_obs.astype(int))
    rec_trans.append(np.full(n, 2))
    rec_subj.append(idx)
    rec_start.append(np.zeros(n))
    rec_stop.append(arf_end)
    rec_status.append(nrm_obs.astype(int))

    rel = np.flatnonzero(relapse_obs)
    if len(rel):
        death = traj.t_death_after_relapse[rel]
        end = np.minimum(death, cens[rel])
        rec_trans.append(np.full(len(rel), 3))
        rec_subj.append(rel)
        rec_start.append(traj.t_relapse[rel])
        rec_stop.append(end)
        rec_status.append((death < cens[rel]).astype(int))

    demographics = [
        Demographics(
            float(traj.age_days[i]),
            "male" if traj.sex_idx[i] == 0 else "female",
            date.fromordinal(_EPOCH.toordinal() + int(traj.origin_day[i])),
        )
        for i in range(n)
    ]
    return EventDataset(
        model,
        [str(i + 1) for i in range(n)],
        demographics,
        np.concatenate(rec_trans),
        np.concatenate(rec_subj),
        np.concatenate(rec_start),
        np.concatenate(rec_stop),
        np.concatenate(rec_status),
    )


def _uncensored_endpoints(config, table, seed, n):
    rng = np.random.default_rng([seed, 909090])
    traj, _, _ = _draw_latent(config, table, rng, n)
    end = np.where(traj.relapse_first, traj.t_death_after_relapse, traj.t_first)
    return np.minimum(end, config.tau_days) / DAYS_PER_YEAR


def censored_fraction(
    config: ScenarioConfig, table: RateTable, seed=0, n: int = 20000
) -> float:
    """Expected share of subjects whose follow-up ends by exponential
    censoring before death and before the horizon.

    Conditional on a trajectory ending (uncensored) at time ``end``,
    the censoring probability is 1 - exp(-rate * end), so the share is
    averaged analytically over one set of simulated trajectories."""
    end_years = _uncensored_endpoints(config, table, seed, n)
    return float(np.mean(-np.expm1(-config.censoring_rate * end_years)))


def calibrate_censoring(
    config: ScenarioConfig,
    table: RateTable,
    target: float = 0.20,
    seed=0,
    n: int = 40000,
) -> float:
    """Censoring rate (per year) hitting the target censored share,
    root-found on a fixed set of simulated trajectories."""
    from scipy.optimize import brentq

    end_years = _uncensored_endpoints(config, table, seed, n)

    def f(rate):
        return float(np.mean(-np.expm1(-rate * end_years))) - target

    return float(brentq(f, 1e-6, 50.0, xtol=1e-8))


def _with_censoring(config: ScenarioConfig, rate: float) -> ScenarioConfig:
    d = config.to_json()
    d["censoring_rate"] = rate
    return ScenarioConfig.from_json(d)


# ---------------------------------------------------------------------------
# True values

HAZARD_TARGETS = (
    ("hazard", 1, "relapse"),
    ("hazard", 4, "NRM.e"),
    ("hazard", 5, "NRM.p"),
    ("hazard", 6, "DaR.e"),
    ("hazard", 7, "DaR.p"),
)
PROB_TARGETS = (
    ("prob", 1, "ARF"),
    ("prob", 2, "Relapse"),
    ("prob", 3, "NRM.e"),
    ("prob", 4, "NRM.p"),
    ("prob", 5, "DaR.e"),
    ("prob", 6, "DaR.p"),
)
ALL_TARGETS = HAZARD_TARGETS + PROB_TARGETS


@dataclass
class TrueValues:
    eval_days: np.ndarray
    values: dict[tuple, np.ndarray]  # (kind, id) -> per-eval-time truths
    method: str
    draws: int | None = None

    def value(self, kind: str, ident: int) -> np.ndarray:
        return self.values[(kind, ident)]

    def to_frame(self) -> pd.DataFrame:
        labels = {(k, i): lab for k, i, lab in ALL_TARGETS}
        rows = []
        for (kind, ident), vals in self.values.items():
            for t, v in zip(self.eval_days, vals):
                rows.append(
                    {
                        "target": f"{kind}:{labels[(kind, ident)]}",
                        "kind": kind,
                        "id": ident,
                        "time_years": t / DAYS_PER_YEAR,
                        "truth": v,
                    }
                )
        return pd.DataFrame(rows)


def true_values(
    config: ScenarioConfig,
    table: RateTable,
    method: str = "mc",
    draws: int = 10**6,
    seed: int = 0,
    tol: float = 1e-6,
    max_refine: int = 5,
) -> TrueValues:
    """Exact estimand values by integration over the covariate
    distribution.

    ``method="mc"`` uses a large uncensored trajectory sample with
    common random numbers across evaluation times (the default);
    ``method="quadrature"`` integrates over an age x sex x origin-date
    grid, doubling the grid until the relative change drops below
    ``tol`` (raising :class:`QuadratureError` otherwise).
    """
    if method == "mc":
        return _true_values_mc(config, table, draws, seed)
    if method == "quadrature":
        return _true_values_quadrature(config, table, tol, max_refine)
    raise ValueError("method must be 'mc' or 'quadrature'")


def _true_values_mc(config, table, draws, seed):
    n_days = int(np.ceil(config.tau_days))
    eval_days = config.eval_days
    den1 = np.zeros(n_days)
    num1p = np.zeros(n_days)
    num1rel = np.zeros(n_days)
    num1ne = np.zeros(n_days)
    den2 = np.zeros(n_days)
    num2p = np.zeros(n_days)
    num2de = np.zeros(n_days)
    occ = np.zeros((6, len(eval_days)))

    chunk = 5000  # keeps the per-chunk day-grid arrays cache friendly
    n_chunks = int(np.ceil(draws / chunk))
    dd = np.arange(n_days)
    for c in range(n_chunks):
        m = min(chunk, draws - c * chunk)
        rng = np.random.default_rng([seed, 777, c])
        traj, pop, _ = _draw_latent(config, table, rng, m)
        age_c = traj.age_days / DAYS_PER_YEAR - config.mean_age
        t_first = traj.t_first
        in_arf = dd[None, :] < np.minimum(np.floor(t_first), n_days)[:, None]
        den1 += in_arf.sum(axis=0)
        num1p += (in_arf * pop).sum(axis=0)
        num1rel += in_arf.T @ config.relapse.rel_risk(age_c)
        num1ne += in_arf.T @ config.nrm_excess.rel_risk(age_c)

        rel = traj.relapse_first
        t_death = np.where(rel, traj.t_death_after_relapse, 0.0)
        lo = np.floor(np.where(rel, traj.t_relapse, np.inf))[:, None]
        hi = np.minimum(np.floor(t_death), n_days)[:, None]
        in_rel = (dd[None, :] >= lo) & (dd[None, :] < hi)
        den2 += in_rel.sum(axis=0)
        num2p += (in_rel * pop).sum(axis=0)
        num2de += in_rel.T @ config.dar_excess.rel_risk(age_c)

        for k, t in enumerate(eval_days):
            state = np.ones(m, dtype=int)  # 1 = ARF
            gone = t_first <= t
            nrm_e = gone & ~rel & (traj.t_nrm_excess <= traj.t_nrm_pop)
            nrm_p = gone & ~rel & ~(traj.t_nrm_excess <= traj.t_nrm_pop)
            state[nrm_e] = 3
            state[nrm_p] = 4
            relapsed = rel & (traj.t_relapse <= t)
            state[relapsed] = 2
            dead_after = relapsed & (t_death <= t)
            dar_e = dead_after & (traj.t_dar_excess <= traj.t_dar_pop)
            state[dar_e] = 5
            state[dead_after & ~(traj.t_dar_excess <= traj.t_dar_pop)] = 6
            occ[:, k] += np.bincount(state - 1, minlength=6)

    occ /= draws
    values = {("prob", j): occ[j - 1] for j in range(1, 7)}

    def haz_truth(spec, num, den, pop_num=None):
        """Day-grid marginal hazard integral; continuous parts carry the
        partial-day fraction, population parts use whole days only."""
        with np.errstate(invalid="ignore"):
            ratio = np.where(den > 0, num / den, 0.0)
        if pop_num is None:
            base = spec.cumhaz0(dd + 1.0) - spec.cumhaz0(dd.astype(float))
            inc = base * ratio
        else:
            inc = ratio
        cum = np.concatenate([[0.0], np.cumsum(inc)])
        out = np.empty(len(eval_days))
        for k, t in enumerate(eval_days):
            d = int(min(np.floor(t), n_days))
            out[k] = cum[d]
            if pop_num is None and d < n_days and t > d:
                out[k] += (spec.cumhaz0(t) - spec.cumhaz0(float(d))) * ratio[d]
        return out

    values[("hazard", 1)] = haz_truth(config.relapse, num1rel, den1)
    values[("hazard", 4)] = haz_truth(config.nrm_excess, num1ne, den1)
    values[("hazard", 5)] = haz_truth(None, num1p, den1, pop_num=True)
    values[("hazard", 6)] = haz_truth(config.dar_excess, num2de, den2)
    values[("hazard", 7)] = haz_truth(None, num2p, den2, pop_num=True)
    return TrueValues(eval_days, values, "mc", draws)


def _quadrature_nodes(config, n_age, n_date):
    lo, hi = config.age_range
    age_mid = lo + (np.arange(n_age) + 0.5) * (hi - lo) / n_age
    d0 = (date.fromisoformat(config.origin_range[0]) - _EPOCH).days
    d1 = (date.fromisoformat(config.origin_range[1]) - _EPOCH).days
    date_mid = d0 + (np.arange(n_date) + 0.5) * (d1 - d0) / n_date
    ages, dates, sexes = np.meshgrid(
        age_mid, date_mid.astype(np.int64), [0, 1], indexing="ij"
    )
    return ages.ravel() * DAYS_PER_YEAR, sexes.ravel(), dates.ravel()


def _true_values_quadrature(config, table, tol, max_refine):
    prev = None
    n_age, n_date = 16, 8
    for _ in range(max_refine + 1):
        vals = _quadrature_pass(config, table, n_age, n_date)
        if prev is not None:
            rel = max(
                float(
                    np.max(
                        np.abs(vals[key] - prev[key])
                        / np.maximum(np.abs(vals[key]), 1e-12)
                    )
                )
                for key in vals
            )
            if rel < tol:
                return TrueValues(config.eval_days, vals, "quadrature")
        prev = vals
        n_age *= 2
        n_date *= 2
    raise QuadratureError(
        f"no convergence below {tol} after {max_refine} refinements "
        f"(day-grid table lookups limit the achievable tolerance; "
        f"loosen tol or use method='mc')"
    )


def _quadrature_pass(config, table, n_age, n_date):
    age_days, sex_idx, origin_day = _quadrature_nodes(config, n_age, n_date)
    n_days = int(np.ceil(config.tau_days))
    eval_days = config.eval_days
    dd = np.arange(n_days, dtype=float)
    mids = dd + 0.5
    age_c = age_days / DAYS_PER_YEAR - config.mean_age

    den1 = np.zeros(n_days)
    num1p = np.zeros(n_days)
    num1rel = np.zeros(n_days)
    num1ne = np.zeros(n_days)
    den2 = np.zeros(n_days)
    num2p = np.zeros(n_days)
    num2de = np.zeros(n_days)
    occ = np.zeros((6, len(eval_days)))
    n_nodes = len(age_days)

    chunk = 128
    for lo_i in range(0, n_nodes, chunk):
        hi_i = min(lo_i + chunk, n_nodes)
        sl = slice(lo_i, hi_i)
        pop = daily_hazard_matrix(
            table, age_days[sl], sex_idx[sl], origin_day[sl], n_days
        )
        cum = np.concatenate(
            [np.zeros((pop.shape[0], 1)), np.cumsum(pop, axis=1)], axis=1
        )
        lam_p_mid = cum[:, :-1] + 0.5 * pop
        rr_rel = config.relapse.rel_risk(age_c[sl])[:, None]
        rr_ne = config.nrm_excess.rel_risk(age_c[sl])[:, None]
        rr_de = config.dar_excess.rel_risk(age_c[sl])[:, None]

        lam_rel_mid = config.relapse.cumhaz0(mids)[None, :] * rr_rel
        lam_ne_mid = config.nrm_excess.cumhaz0(mids)[None, :] * rr_ne
        lam_de_mid = config.dar_excess.cumhaz0(mids)[None, :] * rr_de
        d_rel = np.diff(
            config.relapse.cumhaz0(np.arange(n_days + 1.0))[None, :] * rr_rel, axis=1
        )
        d_ne = np.diff(
            config.nrm_excess.cumhaz0(np.arange(n_days + 1.0))[None, :] * rr_ne, axis=1
        )
        d_de = np.diff(
            config.dar_excess.cumhaz0(np.arange(n_days + 1.0))[None, :] * rr_de, axis=1
        )

        s1_mid = np.exp(-(lam_rel_mid + lam_ne_mid + lam_p_mid))
        g_mid = np.exp(-(lam_de_mid + lam_p_mid))
        h_inc = s1_mid * d_rel / g_mid
        h_end = np.cumsum(h_inc, axis=1)
        h_mid = h_end - 0.5 * h_inc
        m2_mid = g_mid * h_mid

        den1 += s1_mid.sum(axis=0)
        num1p += (s1_mid * pop).sum(axis=0)
        num1rel += (s1_mid * rr_rel).sum(axis=0)
        num1ne += (s1_mid * rr_ne).sum(axis=0)
        den2 += m2_mid.sum(axis=0)
        num2p += (m2_mid * pop).sum(axis=0)
        num2de += (m2_mid * rr_de).sum(axis=0)

        # occupancies at the evaluation times
        for k, t in enumerate(eval_days):
            d = int(np.floor(t))
            frac = t - d
            lam_p_t = cum[:, min(d, n_days)] + (
                frac * pop[:, d] if d < n_days else 0.0
            )
            lam_rel_t = config.relapse.cumhaz0(t) * rr_rel[:, 0]
            lam_ne_t = config.nrm_excess.cumhaz0(t) * rr_ne[:, 0]
            lam_de_t = config.dar_excess.cumhaz0(t) * rr_de[:, 0]
            s1_t = np.exp(-(lam_rel_t + lam_ne_t + lam_p_t))
            g_t = np.exp(-(lam_de_t + lam_p_t))

            occ[0, k] += s1_t.sum()
            ne_full = (s1_mid[:, :d] * d_ne[:, :d]).sum(axis=1)
            np_full = (s1_mid[:, :d] * pop[:, :d]).sum(axis=1)
            de_full = (m2_mid[:, :d] * d_de[:, :d]).sum(axis=1)
            dp_full = (m2_mid[:, :d] * pop[:, :d]).sum(axis=1)
            h_t = h_end[:, d - 1] if d > 0 else np.zeros(pop.shape[0])
            if d < n_days and frac > 0:
                pm = d + frac / 2
                lam_p_pm = cum[:, d] + (frac / 2) * pop[:, d]
                s1_pm = np.exp(
                    -(
                        config.relapse.cumhaz0(pm) * rr_rel[:, 0]
                        + config.nrm_excess.cumhaz0(pm) * rr_ne[:, 0]
                        + lam_p_pm
                    )
                )
                g_pm = np.exp(
                    -(config.dar_excess.cumhaz0(pm) * rr_de[:, 0] + lam_p_pm)
                )
                dn_rel = (
                    config.relapse.cumhaz0(t) - config.relapse.cumhaz0(float(d))
                ) * rr_rel[:, 0]
                dn_ne = (
                    config.nrm_excess.cumhaz0(t) - config.nrm_excess.cumhaz0(float(d))
                ) * rr_ne[:, 0]
                dn_de = (
                    config.dar_excess.cumhaz0(t) - config.dar_excess.cumhaz0(float(d))
                ) * rr_de[:, 0]
                dn_p = frac * pop[:, d]
                m2_pm = g_pm * (h_t + 0.5 * s1_pm * dn_rel / g_pm)
                ne_full += s1_pm * dn_ne
                np_full += s1_pm * dn_p
                de_full += m2_pm * dn_de
                dp_full += m2_pm * dn_p
                h_t = h_t + s1_pm * dn_rel / g_pm
            occ[1, k] += (g_t * h_t).sum()
            occ[2, k] += ne_full.sum()
            occ[3, k] += np_full.sum()
            occ[4, k] += de_full.sum()
            occ[5, k] += dp_full.sum()

    occ /= n_nodes
    den1 /= n_nodes
    den2 /= n_nodes
    for arr in (num1p, num1rel, num1ne, num2p, num2de):
        arr /= n_nodes

    values = {("prob", j): occ[j - 1].copy() for j in range(1, 7)}

    def haz_truth(spec, num, den, population=False):
        with np.errstate(invalid="ignore"):
            ratio = np.where(den > 0, num / den, 0.0)
        if population:
            inc = ratio
        else:
            base = spec.cumhaz0(np.arange(1.0, n_days + 1)) - spec.cumhaz0(
                np.arange(0.0, n_days)
            )
            inc = base * ratio
        cum = np.concatenate([[0.0], np.cumsum(inc)])
        out = np.empty(len(eval_days))
        for k, t in enumerate(eval_days):
            d = int(min(np.floor(t), n_days))
            out[k] = cum[d]
            if not population and d < n_days and t > d:
                out[k] += (spec.cumhaz0(t) - spec.cumhaz0(float(d))) * ratio[d]
        return out

    values[("hazard", 1)] = haz_truth(config.relapse, num1rel, den1)
    values[("hazard", 4)] = haz_truth(config.nrm_excess, num1ne, den1)
    values[("hazard", 5)] = haz_truth(None, num1p, den1, population=True)
    values[("hazard", 6)] = haz_truth(config.dar_excess, num2de, den2)
    values[("hazard", 7)] = haz_truth(None, num2p, den2, population=True)
    return values


# ---------------------------------------------------------------------------
# Study loop and performance evaluation


def run_replication(
    config: ScenarioConfig,
    table: RateTable,
    rep: int,
    seed: int = 0,
    B: int = 100,
    ci_methods=CI_METHODS,
    level: float = 0.95,
) -> dict:
    """Estimates, standard errors and intervals of one replication at
    the scenario evaluation times."""
    rng = np.random.default_rng([seed, rep])
    dataset = generate_dataset(config, table, rng)
    eval_days = config.eval_days
    design = Design(dataset, table, t_max=config.tau_days)
    est = design.estimate()
    gw = design.greenwood(est)
    boot = bootstrap(dataset, table, B=B, seed=[seed, rep], design=design)

    n_t = len(ALL_TARGETS)
    n_e = len(eval_days)
    out_est = np.empty((n_t, n_e))
    out_gw = np.empty((n_t, n_e))
    out_boot_var = np.empty((n_t, n_e))
    out_ci = np.full((len(ci_methods), n_t, n_e, 2), np.nan)

    for ti, (kind, ident, _) in enumerate(ALL_TARGETS):
        if kind == "hazard":
            values = est.hazard_at(ident, eval_days)[0]
            gw_var = gw.hazard_var_at(ident, eval_days)
        else:
            values = est.prob_at(ident, eval_days)[0]
            gw_var = gw.prob_var_at(ident, eval_days)
        bt = boot.target_at((kind, ident), eval_days)
        out_est[ti] = values
        out_gw[ti] = gw_var
        out_boot_var[ti] = bt.variance()
        te = TargetEstimate((kind, ident), eval_days, values, gw_var)
        for mi, method in enumerate(ci_methods):
            ci = confidence_interval(method, est=te, boot=bt, level=level)
            out_ci[mi, ti, :, 0] = ci.lower
            out_ci[mi, ti, :, 1] = ci.upper

    return {
        "rep": rep,
        "est": out_est,
        "gw_var": out_gw,
        "boot_var": out_boot_var,
        "ci": out_ci,
        "n_bad_replicates": boot.n_bad_replicates,
    }


def _replication_worker(args):
    config, table, rep, seed, B, ci_methods, level = args
    return run_replication(config, table, rep, seed=seed, B=B,
                           ci_methods=ci_methods, level=level)


def run_study(
    config: ScenarioConfig,
    table: RateTable,
    seed: int = 0,
    B: int = 100,
    n_sim: int | None = None,
    ci_methods=CI_METHODS,
    level: float = 0.95,
    threads: int = 1,
    truth: TrueValues | None = None,
    truth_method: str = "mc",
    truth_draws: int = 10**6,
    progress=None,
) -> pd.DataFrame:
    """Full scenario study: replications, bootstrap intervals, and the
    performance report against the true values.

    Replication r uses generator streams derived from (seed, r), so the
    report is identical for any ``threads`` count.
    """
    n_sim = config.n_sim if n_sim is None else n_sim
    if truth is None:
        truth = true_values(
            config, table, method=truth_method, draws=truth_draws, seed=seed
        )
    args = [(config, table, rep, seed, B, tuple(ci_methods), level)
            for rep in range(n_sim)]
    results = [None] * n_sim
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for res in pool.map(_replication_worker, args, chunksize=1):
                results[res["rep"]] = res
                if progress:
                    progress(res["rep"])
    else:
        for a in args:
            res = _replication_worker(a)
            results[res["rep"]] = res
            if progress:
                progress(res["rep"])
    return evaluate(results, truth, config, ci_methods=tuple(ci_methods), level=level)


def evaluate(
    results: list[dict],
    truth: TrueValues,
    config: ScenarioConfig,
    ci_methods=CI_METHODS,
    level: float = 0.95,
) -> pd.DataFrame:
    """Performance report: bias, SEs and coverage per target and time.

    Relative bias is (mean estimate - truth) / truth, missing where the
    truth is zero; coverage is the share of replications whose interval
    contains the truth (undefined intervals never cover).
    """
    est = np.stack([r["est"] for r in results])          # (R, T, E)
    gw_se = np.sqrt(np.stack([r["gw_var"] for r in results]))
    boot_se = np.sqrt(np.stack([r["boot_var"] for r in results]))
    ci = np.stack([r["ci"] for r in results])            # (R, M, T, E, 2)

    labels = {(k, i): lab for k, i, lab in ALL_TARGETS}
    rows = []
    for ti, (kind, ident, label) in enumerate(ALL_TARGETS):
        theta = truth.value(kind, ident)
        for ei, t in enumerate(truth.eval_days):
            col = est[:, ti, ei]
            mean_est = float(np.nanmean(col))
            emp_se = float(np.nanstd(col, ddof=1))
            abs_bias = theta[ei] - mean_est
            row = {
                "scenario": config.name,
                "n": config.n,
                "n_sim": len(results),
                "target": f"{kind}:{labels[(kind, ident)]}",
                "kind": kind,
                "label": label,
                "time_years": t / DAYS_PER_YEAR,
                "truth": theta[ei],
                "mean_est": mean_est,
                "abs_bias": abs_bias,
                "rel_bias": abs_bias / theta[ei] if theta[ei] != 0 else np.nan,
                "empirical_se": emp_se,
                "mean_greenwood_se": float(np.nanmean(gw_se[:, ti, ei])),
                "mean_boot_se": float(np.nanmean(boot_se[:, ti, ei])),
            }
            for mi, method in enumerate(ci_methods):
                lo = ci[:, mi, ti, ei, 0]
                hi = ci[:, mi, ti, ei, 1]
                covered = (lo <= theta[ei]) & (theta[ei] <= hi)
                row[f"coverage_{method}"] = float(np.mean(covered))
                row[f"defined_{method}"] = float(np.mean(~np.isnan(lo)))
            rows.append(row)
    return pd.DataFrame(rows)


def report_long(report: pd.DataFrame) -> pd.DataFrame:
    """Plot-ready long format: one row per (target, time, metric)."""
    id_cols = ["scenario", "n", "n_sim", "target", "kind", "label", "time_years"]
    value_cols = [c for c in report.columns if c not in id_cols]
    return report.melt(
        id_vars=id_cols, value_vars=value_cols, var_name="metric", value_name="value"
    )
