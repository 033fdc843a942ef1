import numpy as np
import pytest

from relmsm.inference import (
    BootTarget,
    TargetEstimate,
    bootstrap,
    ci_log_boot,
    ci_plain_boot,
    ci_plain_greenwood,
    ci_quantile_boot,
    enumerate_resamples,
    resample_weights,
)
from relmsm.ratetable import demo_ratetable

from conftest import const_table, dem, illness_death_dataset, two_state_dataset

Z975 = 1.9599639845400545  # standard normal 97.5% quantile


# -- bootstrap ----------------------------------------------------------


def test_exhaustive_two_subject_oracle():
    # subject 0: event at t=1; subject 1: censored at t=2.
    # resamples (0,0) (0,1) (1,0) (1,1) give NA(1) = 1, 1/2, 1/2, 0.
    ds = two_state_dataset([(1.0, 1), (2.0, 0)])
    res = bootstrap(ds, replicates=enumerate_resamples(2))
    tgt = res.target(("hazard", 1))
    reps = np.sort(tgt.reps[:, 0])
    assert reps == pytest.approx([0.0, 0.5, 0.5, 1.0], abs=1e-15)
    # sample variance (denominator B-1) over the four enumerated values
    assert tgt.variance()[0] == pytest.approx(1 / 6, abs=1e-12)


def test_random_bootstrap_approaches_enumeration():
    ds = two_state_dataset([(1.0, 1), (2.0, 0)])
    res = bootstrap(ds, B=600, seed=7)
    # population variance of the resampling distribution is 0.125
    assert 0.10 < res.target(("hazard", 1)).variance()[0] < 0.15


def test_bootstrap_bit_reproducible():
    rt = demo_ratetable()
    ds = illness_death_dataset(
        [("arf", 100.0, 1, 0), ("relapse", 100.0, 400.0, 1), ("arf", 300.0, 0, 1)]
    )
    r1 = bootstrap(ds, rt, B=20, seed=42)
    r2 = bootstrap(ds, rt, B=20, seed=42)
    for key in r1.keys():
        assert np.array_equal(r1.target(key).reps, r2.target(key).reps, equal_nan=True)
    r3 = bootstrap(ds, rt, B=20, seed=43)
    assert not np.array_equal(
        r3.target(("hazard", 1)).reps, r1.target(("hazard", 1)).reps, equal_nan=True
    )


def test_replicate_weights_scheduling_independent():
    w = resample_weights(5, 8, seed=11)
    for b in (0, 3, 7):
        rng = np.random.default_rng([11, b])
        assert np.array_equal(w[b], np.bincount(rng.integers(0, 5, 5), minlength=5))


def test_identical_subjects_zero_population_variance():
    ds = two_state_dataset([(300.0, 0)] * 3, split=True)
    res = bootstrap(ds, const_table(1e-4), B=30, seed=5)
    # identical trajectories and demographics: no compositional variability
    assert np.all(res.target(("hazard", 3)).variance() == 0.0)


def test_missing_replicates_counted():
    ds = illness_death_dataset(
        [("relapse", 100.0, 400.0, 1)] + [("arf", 300.0, 0, 0)] * 5
    )
    res = bootstrap(ds, demo_ratetable(), B=40, seed=3)
    tgt = res.target(("hazard", 6))
    # some resamples omit the only relapsing subject
    assert 0 < tgt.n_missing < 40
    assert np.isnan(tgt.reps).any()
    assert res.n_bad_replicates == tgt.n_missing


def test_bootstrap_requires_two_replicates():
    ds = two_state_dataset([(1.0, 1), (2.0, 0)])
    with pytest.raises(ValueError, match="B must be"):
        bootstrap(ds, B=1)


# -- confidence intervals ------------------------------------------------


def target(values, variance=None, times=None):
    values = np.asarray(values, dtype=float)
    t = np.arange(1.0, len(values) + 1) if times is None else np.asarray(times)
    var = None if variance is None else np.asarray(variance, dtype=float)
    return TargetEstimate(("hazard", 1), t, values, var)


def test_plain_greenwood_oracle():
    ci = ci_plain_greenwood(target([0.5], [0.01]), level=0.95)
    assert ci.lower[0] == pytest.approx(0.5 - Z975 * 0.1, abs=1e-9)
    assert ci.upper[0] == pytest.approx(0.5 + Z975 * 0.1, abs=1e-9)
    assert ci.lower[0] == pytest.approx(0.30400360, abs=1e-7)
    assert ci.upper[0] == pytest.approx(0.69599640, abs=1e-7)


def test_plain_zero_variance_zero_width():
    ci = ci_plain_greenwood(target([0.37], [0.0]))
    assert ci.lower[0] == ci.upper[0] == 0.37
    assert ci.flag[0] == ""


def test_plain_infinite_variance_flagged():
    ci = ci_plain_greenwood(target([0.5], [np.inf]))
    assert np.isinf(ci.lower[0]) and np.isinf(ci.upper[0])
    assert ci.flag[0] == "infinite_variance"


def boot_of(values_by_rep, times=None):
    reps = np.asarray(values_by_rep, dtype=float)
    t = np.arange(1.0, reps.shape[1] + 1) if times is None else np.asarray(times)
    return BootTarget(("hazard", 1), t, reps)


def test_plain_boot_matches_plain_arithmetic():
    reps = boot_of([[0.4], [0.6]])  # sample variance 0.02
    ci = ci_plain_boot(target([0.5]), reps, level=0.95)
    sd = np.sqrt(0.02)
    assert ci.lower[0] == pytest.approx(0.5 - Z975 * sd, abs=1e-12)
    assert ci.upper[0] == pytest.approx(0.5 + Z975 * sd, abs=1e-12)


def test_plain_boot_exhaustive_two_subject():
    ds = two_state_dataset([(1.0, 1), (2.0, 0)])
    res = bootstrap(ds, replicates=enumerate_resamples(2))
    tgt = res.target_at(("hazard", 1), [1.0])
    est = target([0.5], times=[1.0])
    ci = ci_plain_boot(est, tgt, level=0.95)
    sd = np.sqrt(1 / 6)
    assert ci.lower[0] == pytest.approx(0.5 - Z975 * sd, abs=1e-12)
    assert ci.upper[0] == pytest.approx(0.5 + Z975 * sd, abs=1e-12)


def test_log_boot_oracle():
    reps = np.array([[0.4], [0.6]])
    # force variance 0.01: use synthetic replicates with that spread
    reps = np.array([[0.5 - np.sqrt(0.005)], [0.5 + np.sqrt(0.005)]])
    boot = boot_of(reps)
    assert boot.variance()[0] == pytest.approx(0.01, abs=1e-15)
    ci = ci_log_boot(target([0.5]), boot, level=0.95)
    assert ci.lower[0] == pytest.approx(0.33785449, abs=1e-7)
    assert ci.upper[0] == pytest.approx(0.73996353, abs=1e-7)


def test_log_boot_zero_variance():
    ci = ci_log_boot(target([0.5]), boot_of([[0.5], [0.5]]))
    assert ci.lower[0] == ci.upper[0] == 0.5


def test_log_boot_nonpositive_flagged():
    ci = ci_log_boot(target([0.0, -0.1]), boot_of([[0.1, 0.0], [0.2, -0.2]]))
    assert list(ci.flag) == ["undefined", "undefined"]
    assert np.isnan(ci.lower).all()


def test_quantile_oracle_order_statistics():
    reps = np.arange(1.0, 101.0)[:, None]
    ci = ci_quantile_boot(boot_of(reps), level=0.95)

    def type7(values, p):
        v = np.sort(values)
        pos = p * (len(v) - 1)
        g = int(np.floor(pos))
        frac = pos - g
        return v[g] + frac * (v[min(g + 1, len(v) - 1)] - v[g])

    assert ci.lower[0] == pytest.approx(type7(reps[:, 0], 0.025), abs=1e-12)
    assert ci.upper[0] == pytest.approx(type7(reps[:, 0], 0.975), abs=1e-12)
    assert ci.lower[0] == pytest.approx(3.475, abs=1e-12)
    assert ci.upper[0] == pytest.approx(97.525, abs=1e-12)


def test_quantile_constant_replicates():
    ci = ci_quantile_boot(boot_of(np.full((50, 1), 0.7)))
    assert ci.lower[0] == ci.upper[0] == 0.7


def test_quantile_level_one_spans_range():
    reps = np.array([[0.1], [0.9], [0.4]])
    ci = ci_quantile_boot(boot_of(reps), level=1.0)
    assert ci.lower[0] == 0.1
    assert ci.upper[0] == 0.9


def test_quantile_warns_for_small_b():
    reps = np.array([[0.1], [0.9], [0.4]])
    with pytest.warns(UserWarning, match="small"):
        ci_quantile_boot(boot_of(reps), level=0.95)


def test_quantile_all_missing_flagged():
    reps = np.full((10, 2), np.nan)
    reps[:, 0] = 0.5
    ci = ci_quantile_boot(boot_of(reps), level=0.8)
    assert ci.flag[1] == "missing"
    assert np.isnan(ci.lower[1])


def test_containment_properties(rng):
    values = rng.uniform(0.1, 2.0, 30)
    reps = values[None, :] + rng.normal(0, 0.05, (80, 30))
    est = target(values)
    boot = boot_of(reps)
    plain = ci_plain_boot(est, boot)
    logb = ci_log_boot(est, boot)
    qb = ci_quantile_boot(boot)
    assert np.all(plain.lower <= values) and np.all(values <= plain.upper)
    assert np.all(logb.lower <= values) and np.all(values <= logb.upper)
    med = np.median(reps, axis=0)
    assert np.all(qb.lower <= med) and np.all(med <= qb.upper)


def test_plain_and_log_agree_for_small_variance():
    theta = 0.8
    widths = []
    for sd in (0.2, 0.02, 0.002, 0.0002):
        reps = np.array([[theta - sd], [theta + sd]])
        boot = boot_of(reps)
        plain = ci_plain_boot(target([theta]), boot)
        logb = ci_log_boot(target([theta]), boot)
        widths.append(
            (logb.upper[0] - logb.lower[0]) / (plain.upper[0] - plain.lower[0])
        )
    assert abs(widths[-1] - 1) < 1e-3
    assert abs(widths[-1] - 1) < abs(widths[0] - 1)
