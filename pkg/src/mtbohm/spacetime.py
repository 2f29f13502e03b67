"""Kinematics of 1+1 dimensional special relativity in natural units (c = 1).

Signature is (+, -): the squared interval between events a and b is
``(b.t - a.t)**2 - (b.z - a.z)**2``.  Boosts are along z only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Event:
    """A point (t, z) on one particle's world sheet."""

    t: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.t) and math.isfinite(self.z)):
            raise ValueError(f"event components must be finite, got {self!r}")


@dataclass(frozen=True)
class ConfigPoint:
    """One event per particle: a point in configuration space-time."""

    events: tuple[Event, ...]

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if len(self.events) < 1:
            raise ValueError("a configuration point needs at least one event")

    @classmethod
    def from_arrays(cls, t, z) -> "ConfigPoint":
        return cls(tuple(Event(float(a), float(b)) for a, b in zip(t, z)))

    @property
    def t(self) -> np.ndarray:
        return np.array([e.t for e in self.events])

    @property
    def z(self) -> np.ndarray:
        return np.array([e.z for e in self.events])

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class Boost:
    """Pure boost along z with velocity ``beta`` (|beta| < 1)."""

    beta: float

    def __post_init__(self):
        if not abs(self.beta) < 1.0:
            raise ValueError(f"boost velocity must satisfy |beta| < 1, got {self.beta}")

    @property
    def gamma(self) -> float:
        return gamma(self.beta)

    def inverse(self) -> "Boost":
        return Boost(-self.beta)

    def then(self, other: "Boost") -> "Boost":
        """Composition: apply ``self`` first, then ``other``."""
        return Boost(compose_velocities(self.beta, other.beta))


class SuperluminalError(ValueError):
    """A velocity with |v| >= 1 reached a kinematic primitive."""


def gamma(v):
    """Lorentz factor (1 - v**2)**-1/2; works on scalars and arrays."""
    return 1.0 / np.sqrt(1.0 - np.square(v))


def compose_velocities(b1: float, b2: float) -> float:
    """Velocity of the frame reached by boosting by b1 then by b2."""
    return (b1 + b2) / (1.0 + b1 * b2)


def interval2(a: Event, b: Event) -> float:
    dt = b.t - a.t
    dz = b.z - a.z
    return dt * dt - dz * dz


def boost_coords(t, z, beta: float):
    """Array form of :func:`boost_event`."""
    g = gamma(beta)
    return g * (t - beta * z), g * (z - beta * t)


def boost_event(e: Event, b: Boost) -> Event:
    t, z = boost_coords(e.t, e.z, b.beta)
    return Event(float(t), float(z))


def boost_point(p: ConfigPoint, b: Boost) -> ConfigPoint:
    return ConfigPoint(tuple(boost_event(e, b) for e in p.events))


def velocity_add(v, b: Boost | float):
    """Velocity ``v`` measured in the frame moving with ``b`` relative to the original.

    Returns (v - beta) / (1 - v beta).
    """
    beta = b.beta if isinstance(b, Boost) else b
    if np.any(np.abs(v) >= 1.0):
        raise SuperluminalError(f"velocity must satisfy |v| < 1, got {v}")
    return (v - beta) / (1.0 - v * beta)


def proper_time_step(v, dtau):
    """Coordinate step (dt, dz) of a particle moving with ``v`` for proper time ``dtau``.

    Satisfies dt**2 - dz**2 == dtau**2.
    """
    if np.any(np.abs(v) >= 1.0):
        raise SuperluminalError(f"guidance velocity is not time-like: {v}")
    if np.any(np.asarray(dtau) <= 0):
        raise ValueError("proper-time increment must be positive")
    dt = gamma(v) * dtau
    return dt, v * dt
