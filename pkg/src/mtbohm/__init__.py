"""Lorentz-invariant de Broglie-Bohm trajectories for two-particle experiments."""
from .spacetime import Boost, ConfigPoint, Event
from .wavefunction import MultiTimeWaveFunction, boost_wavefunction
from .guidance import FrameEqualTime, InvariantProperTime, TrajectoryTable, integrate, integrate_many
from .experiments import EprGeometry, HszGeometry, build_epr, build_hsz

__all__ = [
    "Boost",
    "ConfigPoint",
    "Event",
    "MultiTimeWaveFunction",
    "boost_wavefunction",
    "FrameEqualTime",
    "InvariantProperTime",
    "TrajectoryTable",
    "integrate",
    "integrate_many",
    "EprGeometry",
    "HszGeometry",
    "build_epr",
    "build_hsz",
]

__version__ = "0.1.0"
