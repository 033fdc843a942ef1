"""Bootstrap variance estimation and confidence interval methods.

The bootstrap resamples whole subjects with replacement (a subject's
trajectory and demographics move together) and re-estimates every
target on each resample.  Replicate curves live on the original grids
by last-value-carried-forward, so pointwise variances and quantiles are
well defined.

Four interval methods are provided for a target value theta-hat at a
time point:

* ``plain.G``     theta-hat +/- z * sqrt(Greenwood variance)
* ``plain.boot``  theta-hat +/- z * sqrt(bootstrap variance)
* ``log.boot``    theta-hat * exp(+/- z * sqrt(boot var) / theta-hat)
* ``q.boot``      empirical 2.5% and 97.5% replicate quantiles

with z the standard normal quantile at 1 - alpha/2.  ``log.boot`` is
undefined at theta-hat <= 0 and flagged there.  Replicate quantiles
use linear interpolation of order statistics (position p*(B-1)+1, the
common "type 7" rule).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.stats as st

from .data import EventDataset
from .engine import Design, _lvcf
from .ratetable import RateTable


@dataclass
class TargetEstimate:
    """One estimated curve to build intervals for."""

    key: tuple
    times: np.ndarray
    values: np.ndarray
    variance: np.ndarray | None = None  # Greenwood, aligned with times


@dataclass
class BootTarget:
    """Replicate curves of one target, aligned on the original grid."""

    key: tuple
    times: np.ndarray
    reps: np.ndarray          # (B, len(times)); NaN rows = missing replicate
    n_missing: int = 0

    def variance(self) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanvar(self.reps, axis=0, ddof=1)


@dataclass
class ConfInterval:
    method: str
    level: float
    times: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    flag: np.ndarray  # "" | "undefined" | "infinite_variance" | "missing"
    key: tuple | None = None


class BootstrapResult:
    """Replicate estimates for all targets of one bootstrap run.

    Target keys are ``("hazard", ext_trans_id)`` and
    ``("prob", ext_state)`` (occupancy from the starting state).
    """

    def __init__(self, B, seed, targets, n_bad_replicates):
        self.B = B
        self.seed = seed
        self._targets: dict[tuple, BootTarget] = targets
        self.n_bad_replicates = n_bad_replicates

    def keys(self):
        return list(self._targets)

    def target(self, key: tuple) -> BootTarget:
        return self._targets[key]

    def target_at(self, key: tuple, times) -> BootTarget:
        """The target re-evaluated at arbitrary times (LVCF)."""
        t = self._targets[key]
        before = 1.0 if key[0] == "prob" and key[1] == self._start_ext1 else 0.0
        return BootTarget(
            key, np.atleast_1d(np.asarray(times, float)),
            _lvcf(t.times, t.reps, times, before=before), t.n_missing,
        )


def resample_weights(n: int, B: int, seed) -> np.ndarray:
    """Multiplicity matrix of B resamples of n subjects with replacement.

    Replicate b uses its own generator derived from (seed, b), so the
    result is independent of scheduling or worker count.
    """
    seed_seq = list(np.atleast_1d(seed).astype(np.int64))
    w = np.empty((B, n))
    for b in range(B):
        rng = np.random.default_rng([*seed_seq, b])
        w[b] = np.bincount(rng.integers(0, n, n), minlength=n)
    return w


def bootstrap(
    dataset: EventDataset,
    ratetable: RateTable | None = None,
    B: int = 100,
    seed=0,
    s: float = 0.0,
    t_max: float | None = None,
    start_state: int = 1,
    replicates: list[np.ndarray] | None = None,
    design: Design | None = None,
) -> BootstrapResult:
    """Non-parametric bootstrap of all hazard and probability targets.

    ``replicates`` may supply explicit subject-index arrays (e.g. the
    exhaustive enumeration of a tiny dataset) instead of random
    resampling; ``seed`` is then ignored.
    """
    if replicates is None and B < 2:
        raise ValueError("B must be >= 2")
    if design is None:
        design = Design(dataset, ratetable, s=s, t_max=t_max, start_state=start_state)
    n = dataset.n_subjects
    if replicates is not None:
        w = np.stack([np.bincount(np.asarray(r), minlength=n) for r in replicates])
        w = w.astype(float)
        B = w.shape[0]
    else:
        w = resample_weights(n, B, seed)

    est = design.estimate(w)
    targets: dict[tuple, BootTarget] = {}
    bad = np.zeros(B, dtype=bool)
    for tr in design.active:
        key = ("hazard", tr["ext_id"])
        grid = design.jump_trans[tr["parent"]]["grid"]
        reps = est.hazard_at(tr["ext_id"], grid) if len(grid) else np.zeros((B, 0))
        missing = int((~est.occupied[tr["from_state"]]).sum())
        bad |= ~est.occupied[tr["from_state"]]
        targets[key] = BootTarget(key, grid, reps, missing)
    for j in range(1, design.k_ext + 1):
        key = ("prob", j)
        targets[key] = BootTarget(key, design.prob_grid, est.probs[:, :, j - 1], 0)

    result = BootstrapResult(B, seed, targets, int(bad.sum()))
    result._start_ext1 = design.start_ext + 1
    return result


def enumerate_resamples(n: int) -> list[np.ndarray]:
    """All n**n ordered with-replacement resamples of n subjects (for
    exhaustive-bootstrap oracles on tiny datasets)."""
    if n > 6:
        raise ValueError("exhaustive enumeration is only sensible for tiny n")
    grids = np.meshgrid(*[np.arange(n)] * n, indexing="ij")
    flat = np.stack([g.reshape(-1) for g in grids], axis=1)
    return [flat[i] for i in range(flat.shape[0])]


# ---------------------------------------------------------------------------
# Confidence intervals


def _z(level: float) -> float:
    return float(st.norm.ppf(1 - (1 - level) / 2))


def _plain(values, variance, level, method, times, key):
    z = _z(level)
    sd = np.sqrt(variance)
    lower = values - z * sd
    upper = values + z * sd
    flag = np.where(np.isinf(variance), "infinite_variance", "")
    flag = np.where(np.isnan(variance), "missing", flag)
    return ConfInterval(method, level, times, lower, upper, flag, key)


def ci_plain_greenwood(est: TargetEstimate, level: float = 0.95) -> ConfInterval:
    """Symmetric interval on the plain scale with Greenwood variance.

    Population targets have Greenwood variance zero, so their interval
    collapses to a point; the simulation study shows this understates
    the real uncertainty."""
    if est.variance is None:
        raise ValueError("estimate carries no Greenwood variance")
    return _plain(est.values, est.variance, level, "plain.G", est.times, est.key)


def ci_plain_boot(
    est: TargetEstimate, boot: BootTarget, level: float = 0.95
) -> ConfInterval:
    """Symmetric interval on the plain scale with bootstrap variance."""
    return _plain(est.values, boot.variance(), level, "plain.boot", est.times, est.key)


def ci_log_boot(
    est: TargetEstimate, boot: BootTarget, level: float = 0.95
) -> ConfInterval:
    """Delta-method interval on the log scale with bootstrap variance;
    undefined (flagged) where the estimate is not positive."""
    z = _z(level)
    var = boot.variance()
    ok = est.values > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        spread = np.exp(z * np.sqrt(var) / est.values)
    lower = np.where(ok, est.values / spread, np.nan)
    upper = np.where(ok, est.values * spread, np.nan)
    flag = np.where(ok, "", "undefined")
    flag = np.where(ok & np.isnan(var), "missing", flag)
    return ConfInterval("log.boot", level, est.times, lower, upper, flag, est.key)


def ci_quantile_boot(boot: BootTarget, level: float = 0.95) -> ConfInterval:
    """Empirical replicate quantiles at alpha/2 and 1 - alpha/2.

    Quantiles interpolate order statistics linearly (type 7); times
    where every replicate is missing yield a flagged missing interval.
    """
    B = boot.reps.shape[0]
    min_b = 2 if level >= 1 else int(np.ceil(2 / (1 - level)))
    if B < min_b:
        warnings.warn(
            f"B={B} replicates is small for level {level}; quantile "
            f"intervals will be unstable",
            stacklevel=2,
        )
    alpha = 1 - level
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lower = np.nanquantile(boot.reps, alpha / 2, axis=0, method="linear")
        upper = np.nanquantile(boot.reps, 1 - alpha / 2, axis=0, method="linear")
    all_missing = np.all(np.isnan(boot.reps), axis=0)
    flag = np.where(all_missing, "missing", "")
    return ConfInterval("q.boot", level, boot.times, lower, upper, flag, boot.key)


CI_METHODS = ("plain.G", "plain.boot", "log.boot", "q.boot")


def confidence_interval(
    method: str,
    est: TargetEstimate | None = None,
    boot: BootTarget | None = None,
    level: float = 0.95,
) -> ConfInterval:
    """Dispatch by method name; see the individual functions."""
    if method == "plain.G":
        return ci_plain_greenwood(est, level)
    if method == "plain.boot":
        return ci_plain_boot(est, boot, level)
    if method == "log.boot":
        return ci_log_boot(est, boot, level)
    if method == "q.boot":
        return ci_quantile_boot(boot, level)
    raise ValueError(f"unknown CI method {method!r} (choose from {CI_METHODS})")


def intervals_frame(intervals: list[ConfInterval]) -> pd.DataFrame:
    """Long-format table: time, target, method, level, lower, upper, flag."""
    frames = []
    for ci in intervals:
        key = ci.key if ci.key is not None else ("", "")
        frames.append(
            pd.DataFrame(
                {
                    "time": ci.times,
                    "target": f"{key[0]}:{key[1]}",
                    "method": ci.method,
                    "level": ci.level,
                    "lower": ci.lower,
                    "upper": ci.upper,
                    "flag": ci.flag,
                }
            )
        )
    return pd.concat(frames, ignore_index=True)
