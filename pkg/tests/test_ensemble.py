import math

import numpy as np
import pytest
from scipy import stats

from mtbohm.ensemble import (
    CoordinationSurface,
    check_no_crossing,
    convergence_order,
    default_surface,
    hsz_scenario,
    make_rng,
    matched_start,
    quantile_fate_oracle,
    quantile_oracle_check,
    run_ensemble,
    sample_initial_arrays,
    table_deviation,
)
from mtbohm.experiments import HszGeometry, hsz_experiment
from mtbohm.guidance import FrameEqualTime, InvariantProperTime, TrajectoryTable, integrate_many


def test_rng_is_reproducible():
    assert make_rng(5).random(4).tolist() == make_rng(5).random(4).tolist()
    assert make_rng(5).random() != make_rng(6).random()


def test_surface_validation():
    with pytest.raises(ValueError):
        CoordinationSurface((0.0, math.nan))
    with pytest.raises(ValueError):
        hsz_scenario(HszGeometry(), 3)


def test_epr_marginal_is_gaussian_chi_square(epr):
    t, z = sample_initial_arrays(epr.wf, default_surface(epr), 100_000, seed=1)
    assert np.all(t == 0.0)
    edges = np.concatenate([[-np.inf], np.linspace(-3, 3, 25), [np.inf]])
    observed, _ = np.histogram(z[:, 0], edges)
    expected = np.diff(stats.norm.cdf(edges)) * len(z)
    assert stats.chisquare(observed, expected).pvalue > 1e-3
    assert abs(np.corrcoef(z.T)[0, 1]) < 0.02  # product state in position


def test_hsz_sample_quadrants(hsz):
    t, z = sample_initial_arrays(hsz.wf, CoordinationSurface((0.0, 0.0)), 20_000, seed=2)
    ac = np.mean((z[:, 0] > 0) & (z[:, 1] < 0))
    db = np.mean((z[:, 0] < 0) & (z[:, 1] > 0))
    assert ac == pytest.approx(0.5, abs=0.015)
    tail = stats.norm.cdf(-3.0)  # packet centres sit 3 sigma from the axis
    assert ac + db == pytest.approx((1 - tail) ** 2 + tail**2, abs=1e-3)
    assert np.mean(z[z[:, 0] > 0, 0]) == pytest.approx(3.0, abs=0.05)


def test_sampling_error_scales_as_inverse_sqrt_n(epr):
    sizes = [100, 400, 1600, 6400]
    spread = []
    for n in sizes:
        means = [sample_initial_arrays(epr.wf, default_surface(epr), n, seed=s)[1][:, 0].mean() for s in range(40)]
        spread.append(np.std(means))
    slope = np.polyfit(np.log(sizes), np.log(spread), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.15)


def test_sampling_is_seeded(hsz):
    surf = hsz_scenario(hsz.geometry, 1)
    a = sample_initial_arrays(hsz.wf, surf, 50, seed=9)[1]
    b = sample_initial_arrays(hsz.wf, surf, 50, seed=9)[1]
    c = sample_initial_arrays(hsz.wf, surf, 50, seed=10)[1]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.fixture(scope="module")
def small_run(hsz):
    return run_ensemble(hsz, hsz_scenario(hsz.geometry, 1), InvariantProperTime(2e-2), 300, seed=4, chunk=128)


def test_small_hsz_run_is_perfectly_correlated(small_run):
    assert small_run.counts.get("+-", 0) == 0 and small_run.counts.get("-+", 0) == 0
    assert small_run.n_excluded == 0
    assert small_run.within()
    assert sum(small_run.probabilities.values()) == pytest.approx(1.0)


def test_run_is_deterministic_across_workers(hsz, small_run):
    again = run_ensemble(
        hsz, hsz_scenario(hsz.geometry, 1), InvariantProperTime(2e-2), 300, seed=4, chunk=64, workers=2
    )
    assert again.to_json() == small_run.to_json()


def test_epr_small_run(epr):
    rep = run_ensemble(epr, default_surface(epr), InvariantProperTime(2e-2), 200, seed=3)
    assert rep.anticorrelation == 1.0
    assert rep.counts.get("++", 0) == rep.counts.get("--", 0) == 0
    assert rep.within()


def _table(t, z, rule=None):
    t, z = np.asarray(t, float), np.asarray(z, float)
    meta = {"rule": rule or {"kind": "proper_time", "dtau": 0.1}, "experiment": "x"}
    return TrajectoryTable(t, z, np.zeros(t.shape + (3,)), np.zeros(len(t)), meta)


def test_crossing_detection():
    a = _table([[0, 0], [1, 1]], [[0, 0], [1, 1]])
    b = _table([[0, 0], [1, 1]], [[2, 0], [1, 1]])  # meets a at its second row
    c = _table([[0, 0], [1, 1]], [[5, 5], [6, 6]])
    rep = check_no_crossing([a, b, c])
    assert rep.crossings == [(0, 1)] and not rep.ok
    dup = check_no_crossing([a, a, c])
    assert dup.ok and dup.n_distinct == 2 and dup.n_tables == 3
    with pytest.raises(ValueError):
        check_no_crossing([a, _table(c.t, c.z, {"kind": "equal_time", "dt": 0.1, "beta": 0.0})])


def test_real_trajectories_do_not_cross(hsz):
    t0, z0 = sample_initial_arrays(hsz.wf, hsz_scenario(hsz.geometry, 2), 40, seed=5)
    res = integrate_many(hsz.wf, t0, z0, InvariantProperTime(2e-2), hsz.horizon, experiment=hsz.kind)
    rep = check_no_crossing(res.tables)
    assert rep.ok and rep.min_distance > rep.tol


def test_quantile_oracle():
    assert quantile_fate_oracle(0.7) == "transmitted"
    assert quantile_fate_oracle(0.3) == "reflected"
    with pytest.raises(ValueError):
        quantile_fate_oracle(1.0)
    rep = quantile_oracle_check(n=200, dtau=4e-3)
    assert rep.ok(0.99, 0.02), rep


def test_scenario1_fate_of_particle1_ignores_q2(hsz):
    """In Scenario 1 particle 1 passes its splitter before particle 2 reaches
    its own, so its fate depends on q1 alone."""
    g = HszGeometry(chi=math.pi / 4)
    exp = hsz_experiment(g)
    for q1 in (0.2, 0.8):
        starts = [matched_start(g, 1, q1, q2) for q2 in np.linspace(0.05, 0.95, 10)]
        t0 = np.array([s[0] for s in starts])
        z0 = np.array([s[1] for s in starts])
        res = integrate_many(exp.wf, t0, z0, InvariantProperTime(4e-3), exp.horizon, record=False)
        s1 = exp.classify(res.z).signs[:, 0]
        assert len(set(s1.tolist())) == 1 and s1[0] != 0
        assert s1[0] == (-1 if q1 > 0.5 else 1)  # leading half transmitted (negative exit)


def test_table_deviation_and_order():
    a = _table([[0, 0], [1, 1], [2, 2]], [[0, 0], [0, 0], [0, 0]])
    a.h[:] = [0, 0.1, 0.1]
    b = _table(a.t, a.z + 1e-3)
    b.h[:] = a.h
    assert table_deviation(a, b, 0.1) == pytest.approx(1e-3)
    assert table_deviation(a, _table(a.t[:2], a.z[:2]), 0.1) == math.inf
    assert convergence_order([4e-3, 2e-3, 1e-3], [16e-6, 4e-6, 1e-6]) == pytest.approx(2.0)


def test_equal_time_rule_frame_changes_are_allowed(hsz):
    t0, z0 = sample_initial_arrays(hsz.wf, hsz_scenario(hsz.geometry, 1), 3, seed=6)
    res = integrate_many(hsz.wf, t0, z0, FrameEqualTime(2e-2, 0.3), hsz.horizon, record=False)
    assert res.frame == pytest.approx(0.3)
    assert all(s == "ok" for s in res.status)
