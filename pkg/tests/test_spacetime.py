import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtbohm.spacetime import (
    Boost,
    ConfigPoint,
    Event,
    SuperluminalError,
    boost_event,
    boost_point,
    compose_velocities,
    gamma,
    interval2,
    proper_time_step,
    velocity_add,
)

coord = st.floats(-50, 50, allow_nan=False)
beta = st.floats(-0.9, 0.9)
velocity = st.floats(-0.999, 0.999)


@pytest.mark.parametrize(
    "a, b, expected",
    [((0, 0), (1, 0), 1.0), ((0, 0), (1, 1), 0.0), ((0, 0), (1.25, 0.75), 1.0)],
)
def test_interval2_examples(a, b, expected):
    assert interval2(Event(*a), Event(*b)) == pytest.approx(expected, abs=1e-15)


def test_boost_event_examples():
    assert boost_event(Event(1, 0), Boost(0)) == Event(1, 0)
    e = boost_event(Event(1, 1), Boost(0.6))
    assert (e.t, e.z) == pytest.approx((0.5, 0.5), abs=1e-15)


@pytest.mark.parametrize("b", [1.0, -1.0, 1.5])
def test_boost_rejects_superluminal(b):
    with pytest.raises(ValueError):
        Boost(b)


def test_event_rejects_non_finite():
    with pytest.raises(ValueError):
        Event(math.nan, 0)
    with pytest.raises(ValueError):
        Event(0, math.inf)


@pytest.mark.parametrize("v, b, expected", [(0, 0, 0), (0.5, 0.5, 0), (0.5, -0.5, 0.8)])
def test_velocity_add_examples(v, b, expected):
    assert velocity_add(v, Boost(b)) == pytest.approx(expected, abs=1e-15)


def test_velocity_add_rejects_superluminal_input():
    with pytest.raises(SuperluminalError):
        velocity_add(1.0, 0.2)


def test_proper_time_step_examples():
    assert proper_time_step(0.0, 0.1) == pytest.approx((0.1, 0.0))
    assert proper_time_step(0.6, 1.0) == pytest.approx((1.25, 0.75), abs=1e-15)


def test_proper_time_step_errors():
    with pytest.raises(SuperluminalError):
        proper_time_step(1.0, 0.1)
    with pytest.raises(ValueError):
        proper_time_step(0.1, 0.0)


def test_boost_composition_and_inverse():
    b = Boost(0.3).then(Boost(0.4))
    assert b.beta == pytest.approx(compose_velocities(0.3, 0.4))
    assert Boost(0.3).inverse().beta == -0.3
    assert Boost(0.6).gamma == pytest.approx(1.25)


def test_config_point_roundtrip():
    p = ConfigPoint.from_arrays([1.0, 2.0], [3.0, 4.0])
    assert len(p) == 2
    np.testing.assert_array_equal(p.t, [1, 2])
    q = boost_point(boost_point(p, Boost(0.5)), Boost(-0.5))
    np.testing.assert_allclose(q.z, p.z, atol=1e-12)


@given(coord, coord, coord, coord, beta)
def test_interval_is_boost_invariant(t1, z1, t2, z2, b):
    a, c = Event(t1, z1), Event(t2, z2)
    before = interval2(a, c)
    after = interval2(boost_event(a, Boost(b)), boost_event(c, Boost(b)))
    scale = max(1.0, (t2 - t1) ** 2 + (z2 - z1) ** 2)
    assert abs(after - before) <= 1e-10 * scale * gamma(b) ** 2


@given(st.floats(-5, 5), st.floats(-5, 5), beta)
def test_boost_then_inverse_is_identity(t, z, b):
    e = boost_event(boost_event(Event(t, z), Boost(b)), Boost(-b))
    assert abs(e.t - t) < 1e-12 * gamma(b) ** 2 * 10 and abs(e.z - z) < 1e-12 * gamma(b) ** 2 * 10


@given(velocity, st.floats(1e-6, 10))
def test_proper_time_step_satisfies_interval(v, dtau):
    dt, dz = proper_time_step(v, dtau)
    assert abs(dt * dt - dz * dz - dtau * dtau) <= 1e-12 * dt * dt


@given(velocity, st.floats(-0.999, 0.999))
def test_velocity_add_stays_subluminal(v, b):
    assert abs(velocity_add(v, b)) < 1
