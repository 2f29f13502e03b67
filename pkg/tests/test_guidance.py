import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtbohm.ensemble import hsz_scenario, sample_initial_arrays
from mtbohm.experiments import EprGeometry
from mtbohm.guidance import (
    CSV_HEADER,
    FrameEqualTime,
    InvariantProperTime,
    TrajectoryTable,
    boost_table,
    coordination_check,
    integrate,
    integrate_many,
    read_table_csv,
    rule_from_dict,
    write_table_csv,
)
from mtbohm.spacetime import Boost, ConfigPoint, Event, gamma
from mtbohm.wavefunction import UP, Branch, MultiTimeWaveFunction, PacketHistory, PacketSegment


def inertial(v1, v2):
    hs = tuple(PacketHistory((PacketSegment(Event(0.0, 0.0), v, 1.0),)) for v in (v1, v2))
    return MultiTimeWaveFunction((Branch(1.0, hs, (UP, UP)),), (1.0, 1.0))


START = ConfigPoint((Event(0.0, 0.2), Event(0.0, -0.1)))


@pytest.fixture(scope="module")
def hsz_table(hsz):
    t0, z0 = sample_initial_arrays(hsz.wf, hsz_scenario(hsz.geometry, 1), 1, 11)
    res = integrate_many(hsz.wf, t0, z0, InvariantProperTime(2e-2), hsz.horizon, experiment=hsz.kind)
    return res.tables[0]


def test_rules_validate():
    with pytest.raises(ValueError):
        InvariantProperTime(0.0)
    with pytest.raises(ValueError):
        FrameEqualTime(1e-3, beta=1.0)
    assert rule_from_dict({"kind": "equal_time", "dt": 0.1, "beta": 0.2}) == FrameEqualTime(0.1, 0.2)
    assert rule_from_dict(InvariantProperTime(0.5).describe()) == InvariantProperTime(0.5)


def test_proper_time_inertial_rows():
    tab = integrate(inertial(0.5, -0.6), START, InvariantProperTime(0.1), (5.0, 5.0))
    assert tab.status == "ok"
    dt = np.diff(tab.t, axis=0)
    moving = dt[:, 0] > 0
    np.testing.assert_allclose(dt[moving, 0], 0.1 * gamma(0.5), rtol=1e-12)
    np.testing.assert_allclose(tab.z[:, 0] - 0.2, 0.5 * tab.t[:, 0], atol=1e-12)
    np.testing.assert_allclose(tab.z[:, 1] + 0.1, -0.6 * tab.t[:, 1], atol=1e-12)
    assert coordination_check(tab).ok
    # each particle stops at its own horizon
    assert tab.t[-1, 0] == pytest.approx(5.0, abs=0.1 * gamma(0.6))
    assert tab.t[-1, 1] == pytest.approx(5.0, abs=0.1 * gamma(0.6))


def test_equal_time_inertial_rows():
    tab = integrate(inertial(0.5, -0.6), START, FrameEqualTime(0.1), (3.0, 3.0))
    np.testing.assert_allclose(tab.t[:, 0], tab.t[:, 1], atol=1e-12)
    np.testing.assert_allclose(np.diff(tab.z[:, 0]), 0.05, atol=1e-12)
    assert coordination_check(tab).ok


def test_coordination_check_locates_corrupted_row():
    tab = integrate(inertial(0.3, 0.1), START, InvariantProperTime(0.1), (4.0, 4.0))
    bad = TrajectoryTable(tab.t.copy(), tab.z.copy(), tab.spin, tab.h, tab.meta)
    bad.z[7, 1] += 1e-3
    rep = coordination_check(bad)
    assert not rep.ok
    assert {(r, k) for r, k, _ in rep.violations} == {(7, 1), (8, 1)}
    assert rep.worst_particle == 1


def test_equal_time_table_breaks_its_constraint_when_boosted():
    tab = integrate(inertial(0.5, -0.6), START, FrameEqualTime(0.1), (3.0, 3.0))
    assert not coordination_check(boost_table(tab, Boost(0.4))).ok


def test_proper_time_table_keeps_its_constraint_when_boosted(hsz_table):
    assert coordination_check(hsz_table).ok
    for beta in (0.3, -0.6):
        assert coordination_check(boost_table(hsz_table, Boost(beta)), tol=1e-8).ok


def test_boost_table_metadata_and_inverse(hsz_table):
    b = boost_table(boost_table(hsz_table, Boost(0.5)), Boost(-0.5))
    assert b.meta["boosts"] == [0.5, -0.5]
    assert b.frame == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(b.t, hsz_table.t, atol=1e-10)
    np.testing.assert_allclose(b.z, hsz_table.z, atol=1e-10)
    assert boost_table(hsz_table, Boost(0.0)) is hsz_table


def test_csv_round_trip(tmp_path, hsz_table):
    path = write_table_csv(hsz_table, tmp_path / "traj.csv")
    assert path.read_text().splitlines()[0].split(",") == CSV_HEADER
    back = read_table_csv(path)
    np.testing.assert_allclose(back.t, hsz_table.t, rtol=1e-11)
    np.testing.assert_allclose(back.z, hsz_table.z, rtol=1e-11, atol=1e-11)
    np.testing.assert_array_equal(back.h, hsz_table.h)
    assert back.meta["rule"] == {"kind": "proper_time", "dtau": 2e-2}
    # 12 significant digits limit the recomputed step constraint to ~1e-7
    assert coordination_check(back, tol=1e-6).ok


def test_restart_from_row_reproduces_suffix(hsz, hsz_table):
    r = hsz_table.n_rows // 3
    assert hsz_table.h[r] == hsz_table.h[r + 1]  # restart at nominal step size
    rest = integrate(hsz.wf, hsz_table.point(r), InvariantProperTime(2e-2), hsz.horizon, experiment=hsz.kind)
    assert np.sign(rest.z[-1]).tolist() == np.sign(hsz_table.z[-1]).tolist()
    np.testing.assert_allclose(rest.z[-1], hsz_table.z[-1], atol=1e-6)


def test_epr_outcomes_are_anticorrelated_and_spins_jump(epr):
    g = EprGeometry()
    for z1 in (1.0, -1.0):
        tab = integrate(epr.wf, ConfigPoint((Event(0, z1), Event(0, 0.2))), InvariantProperTime(2e-2), epr.horizon)
        before = tab.t[:, 0] < g.t_i - 1
        np.testing.assert_allclose(tab.spin[before], 0, atol=1e-12)
        s1, s2 = np.sign(tab.z[-1])
        assert s1 == -s2 == np.sign(z1)
        np.testing.assert_allclose(tab.spin[-1, :, 2], [s1, s2], atol=1e-12)


@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(0.01, 0.3))
def test_proper_time_rows_satisfy_constraint(v1, v2, dtau):
    tab = integrate(inertial(v1, v2), START, InvariantProperTime(dtau), (2.0, 2.0))
    assert coordination_check(tab, tol=1e-9).ok
    assert math.isclose(tab.meta["rule"]["dtau"], dtau)
