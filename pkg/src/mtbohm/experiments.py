"""Builders for the two model experiments and their outcome classification.

HSZ interferometer (two particles, each split at an emission source, reflected
by mirrors at ``t_lambda`` and recombined at a splitter at ``t_mu``)::

    Psi = e^{i phi}/sqrt2 * a(1) c(2)  +  e^{i chi}/sqrt2 * d(1) b(2)

EPR-Bohm (spin singlet, Stern-Gerlach kick ``dp`` along a chosen axis for
each wing at ``t_i``)::

    Psi = sum_{s1,s2} <n1 s1, n2 s2 | singlet> f1^{s1}(1) f2^{s2}(2)

Coordinates: z is the single spatial axis along which packets move (the HSZ
arms, the EPR kick direction).  The EPR flight direction and the transverse
positions of the HSZ splitters are decorative and only used for plots.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.stats import norm

from .spacetime import Event
from .wavefunction import (
    UP,
    Branch,
    FieldWindow,
    MultiTimeWaveFunction,
    PacketHistory,
    PacketSegment,
    Spinor,
    evaluate_many,
)

SPLIT_T = 1 / math.sqrt(2)  # transmitted amplitude
SPLIT_R_PHASE = -math.pi / 2  # reflected child picks up -i
# Field-mode guidance overshoots the packet velocity by about gamma(v) inside
# interference fringes, which biases recombination statistics; a moderate
# speed keeps that bias well below the Monte Carlo error at n = 1e4.
PACKET_SPEED = 0.3


class Outcome(str, Enum):
    PLUS_PLUS = "++"
    PLUS_MINUS = "+-"
    MINUS_PLUS = "-+"
    MINUS_MINUS = "--"
    AMBIGUOUS = "ambiguous"

    @classmethod
    def from_signs(cls, s1: int, s2: int) -> "Outcome":
        return cls(("+" if s1 > 0 else "-") + ("+" if s2 > 0 else "-"))


JOINT_OUTCOMES = (Outcome.PLUS_PLUS, Outcome.PLUS_MINUS, Outcome.MINUS_PLUS, Outcome.MINUS_MINUS)


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# HSZ


@dataclass(frozen=True)
class HszGeometry:
    """Symmetric HSZ layout in the apparatus frame.

    The source sits at ``emission.z``; packets leave it at ``+-v``, are
    reflected by mirrors at ``emission.z +- v (t_lambda - t_e)`` and meet
    again on the splitter at the source position at ``t_mu``.  Each particle's
    outcome is read at ``t_nu``: the positive exit is labelled ``+``.
    """

    phi: float = 0.0
    chi: float = 0.0
    emission: Event = Event(-10.0, 0.0)
    t_lambda: float = 10.0
    t_mu: float = 30.0
    t_nu: float = 50.0
    v: float = PACKET_SPEED
    sigma: float = 1.0
    mass: float = 100.0
    window: float | None = None
    splitter_x: float = 10.0  # decorative transverse offset of the two splitters

    def __post_init__(self):
        t_e = self.emission.t
        if not 0 < self.v < 1:
            raise GeometryError("packet speed v must satisfy 0 < v < 1")
        if not self.sigma > 0 or not self.mass > 0:
            raise GeometryError("sigma and mass must be positive")
        if not t_e < self.t_lambda < self.t_mu < self.t_nu:
            raise GeometryError("need t_emission < t_lambda < t_mu < t_nu")
        if abs(self.t_mu - (2 * self.t_lambda - t_e)) > 1e-9:
            raise GeometryError(
                "reflected packets reach the splitter at 2*t_lambda - t_emission = "
                f"{2 * self.t_lambda - t_e}; t_mu = {self.t_mu} is inconsistent"
            )
        gap = 2 * self.v * (0.0 - t_e) if t_e < 0 else 0.0
        if gap < 6 * self.sigma:
            raise GeometryError(
                f"packets a and d are only {gap:.3g} apart at t=0; need at least 6 sigma "
                "(move the emission event earlier)"
            )
        w = self.window_halfwidth
        if self.t_mu - w <= self.t_lambda or self.t_mu + w >= self.t_nu:
            raise GeometryError("field window around t_mu must lie between t_lambda and t_nu")
        if self.v * (self.t_nu - self.t_mu) < 4 * self.sigma:
            raise GeometryError("exit beams are not separated at t_nu")

    @property
    def window_halfwidth(self) -> float:
        return 4 * self.sigma / self.v if self.window is None else self.window

    @property
    def arm_separation(self) -> float:
        return 2 * self.v * (self.t_lambda - self.emission.t)

    @property
    def mirror_positions(self) -> tuple[float, float]:
        h = self.arm_separation / 2
        return self.emission.z - h, self.emission.z + h

    @property
    def splitter_event(self) -> Event:
        return Event(self.t_mu, self.emission.z)

    def paths(self, particle: int) -> dict[str, int]:
        """Initial direction (+1/-1) of each path of ``particle`` (1 or 2)."""
        return {"a": +1, "d": -1} if particle == 1 else {"c": -1, "b": +1}


def _interferometer_path(g: HszGeometry, name: str, direction: int, split: bool = True):
    """Segments of one path: emission -> mirror -> splitter -> two exits."""
    e = g.emission
    v = direction * g.v
    segs = [PacketSegment(e, v, g.sigma, t_end=g.t_lambda, label=name)]
    mirror = segs[0].end_event
    segs.append(PacketSegment(mirror, -v, g.sigma, t_end=g.t_mu, parent=0, label=f"{name}'"))
    if split:
        at = segs[1].end_event
        # transmitted keeps the incoming direction -v, reflected reverses it
        segs.append(PacketSegment(at, -v, g.sigma, amp=SPLIT_T, parent=1, label=f"{name}_t"))
        segs.append(
            PacketSegment(at, v, g.sigma, amp=SPLIT_T, phase=SPLIT_R_PHASE, parent=1, label=f"{name}_r")
        )
    return PacketHistory(tuple(segs))


def build_hsz(g: HszGeometry | None = None, label: str = "hsz") -> MultiTimeWaveFunction:
    g = g or HszGeometry()
    a = _interferometer_path(g, "a", +1)
    d = _interferometer_path(g, "d", -1)
    c = _interferometer_path(g, "c", -1)
    b = _interferometer_path(g, "b", +1)
    w = g.window_halfwidth
    windows = tuple(FieldWindow(k, g.splitter_event, w, w) for k in (0, 1))
    branches = (
        Branch(np.exp(1j * g.phi) / math.sqrt(2), (a, c), (UP, UP)),
        Branch(np.exp(1j * g.chi) / math.sqrt(2), (d, b), (UP, UP)),
    )
    return MultiTimeWaveFunction(branches, (g.mass, g.mass), windows, label=label)


def hsz_exit_form(g: HszGeometry | None = None) -> MultiTimeWaveFunction:
    """The rearranged form with particle 1 already past its splitter.

    Particle 1's coincident exit beams are merged into single packets
    ``P`` (= a_r = d_t, moving +) and ``N`` (= a_t = d_r, moving -)::

        1/2 [ P(1) {e^{-i pi/2} e^{i phi} c(2) + e^{i chi} b(2)}
            + N(1) {e^{i phi} c(2) + e^{-i pi/2} e^{i chi} b(2)} ]

    Valid for t1 > t_mu and any t2.
    """
    g = g or HszGeometry()
    at = g.splitter_event
    P = PacketHistory((PacketSegment(at, +g.v, g.sigma, label="P1"),))
    N = PacketHistory((PacketSegment(at, -g.v, g.sigma, label="N1"),))
    c = _interferometer_path(g, "c", -1)
    b = _interferometer_path(g, "b", +1)
    ep, ex, mi = np.exp(1j * g.phi), np.exp(1j * g.chi), np.exp(1j * SPLIT_R_PHASE)
    branches = (
        Branch(0.5 * mi * ep, (P, c), (UP, UP)),
        Branch(0.5 * ex, (P, b), (UP, UP)),
        Branch(0.5 * ep, (N, c), (UP, UP)),
        Branch(0.5 * mi * ex, (N, b), (UP, UP)),
    )
    return MultiTimeWaveFunction(branches, (g.mass, g.mass), label="hsz-exit-form")


def rearranged_form_deviation(g: HszGeometry | None = None, n: int = 400, seed: int = 0) -> float:
    """Max |Psi_full - Psi_rearranged| over random points with t1 > t_mu."""
    g = g or HszGeometry()
    rng = np.random.default_rng(seed)
    t1 = rng.uniform(g.t_mu + 1e-6, g.t_nu + 10, n)
    t2 = rng.uniform(g.emission.t, g.t_nu + 10, n)
    span = g.arm_separation / 2 + 5 * g.sigma
    z = rng.uniform(-span, span, (n, 2)) + g.emission.z
    t = np.stack([t1, t2], axis=1)
    full = evaluate_many(build_hsz(g), t, z)
    merged = evaluate_many(hsz_exit_form(g), t, z)
    return float(np.max(np.abs(full - merged)))


def hsz_relative_phases(g: HszGeometry | None = None) -> dict[str, tuple[float, float]]:
    """Phases of particle 2's c and b coefficients in each particle-1 exit beam."""
    g = g or HszGeometry()
    return {
        "+": (SPLIT_R_PHASE + g.phi, g.chi),
        "-": (g.phi, SPLIT_R_PHASE + g.chi),
    }


# ---------------------------------------------------------------------------
# EPR-Bohm

SINGLET = np.array([0, 1, -1, 0], dtype=complex) / math.sqrt(2)


@dataclass(frozen=True)
class EprGeometry:
    emission: Event = Event(0.0, 0.0)
    t_i: float = 20.0
    t_i2: float | None = None
    axis1: tuple[float, float, float] = (0.0, 0.0, 1.0)
    axis2: tuple[float, float, float] = (0.0, 0.0, 1.0)
    dp: float = 0.25
    mass: float = 1.0
    sigma: float = 1.0
    v: float = 0.5  # decorative flight speed along the beam axis
    t_end: float = 60.0
    window: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "axis1", tuple(float(x) for x in self.axis1))
        object.__setattr__(self, "axis2", tuple(float(x) for x in self.axis2))
        for ax in (self.axis1, self.axis2):
            if len(ax) != 3 or not np.linalg.norm(ax) > 0:
                raise GeometryError("measurement axes must be non-zero 3-vectors")
        if not self.sigma > 0 or not self.mass > 0:
            raise GeometryError("sigma and mass must be positive")
        if not 0 < self.kick < 1:
            raise GeometryError("kick velocity dp/mass must lie in (0, 1)")
        if not 0 <= self.v < 1:
            raise GeometryError("flight speed must satisfy 0 <= v < 1")
        for ti in self.interaction_times:
            if not self.emission.t < ti:
                raise GeometryError("interaction must follow emission")
            if not ti + self.window_length < self.t_end:
                raise GeometryError("outcome time t_end must follow the field window")

    @property
    def kick(self) -> float:
        return self.dp / self.mass

    @property
    def interaction_times(self) -> tuple[float, float]:
        return (self.t_i, self.t_i if self.t_i2 is None else self.t_i2)

    @property
    def window_length(self) -> float:
        return 4 * self.sigma / self.kick if self.window is None else self.window


def singlet_coefficients(axis1, axis2) -> dict[tuple[int, int], complex]:
    """<n1 s1, n2 s2 | singlet> for s1, s2 in {+1, -1}."""
    out = {}
    for s1 in (+1, -1):
        for s2 in (+1, -1):
            basis = np.kron(Spinor.along(axis1, s1).vector, Spinor.along(axis2, s2).vector)
            out[(s1, s2)] = complex(np.vdot(basis, SINGLET))
    return out


def build_epr(g: EprGeometry | None = None, label: str = "epr", tol: float = 1e-14):
    g = g or EprGeometry()
    e = g.emission
    histories = {}
    for k, ti in enumerate(g.interaction_times):
        root = PacketSegment(e, 0.0, g.sigma, t_end=ti, label=f"f{k + 1}")
        for s in (+1, -1):
            kid = PacketSegment(
                root.end_event, s * g.kick, g.sigma, parent=0, label=f"f{k + 1}{'+' if s > 0 else '-'}"
            )
            histories[(k, s)] = PacketHistory((root, kid))
    branches = []
    for (s1, s2), coeff in singlet_coefficients(g.axis1, g.axis2).items():
        if abs(coeff) < tol:
            continue
        branches.append(
            Branch(
                coeff,
                (histories[(0, s1)], histories[(1, s2)]),
                (Spinor.along(g.axis1, s1), Spinor.along(g.axis2, s2)),
            )
        )
    windows = tuple(
        FieldWindow(k, Event(ti, e.z), 0.0, g.window_length) for k, ti in enumerate(g.interaction_times)
    )
    return MultiTimeWaveFunction(tuple(branches), (g.mass, g.mass), windows, label=label)


# ---------------------------------------------------------------------------
# single splitter (oracle checks)


@dataclass(frozen=True)
class SplitterGeometry:
    """One particle hitting a splitter at ``event`` while moving at ``-v``.

    A second, free spectator particle at rest keeps the two-particle layout.
    """

    event: Event = Event(0.0, 0.0)
    v: float = PACKET_SPEED
    sigma: float = 1.0
    mass: float = 100.0
    window: float | None = None
    lead: float = 16.0  # how long before the splitter the packet is described

    @property
    def window_halfwidth(self) -> float:
        return 4 * self.sigma / self.v if self.window is None else self.window


def build_single_splitter(g: SplitterGeometry | None = None) -> MultiTimeWaveFunction:
    g = g or SplitterGeometry()
    e = g.event
    start = Event(e.t - g.lead, e.z + g.v * g.lead)
    segs = (
        PacketSegment(start, -g.v, g.sigma, t_end=e.t, label="in"),
        PacketSegment(e, -g.v, g.sigma, amp=SPLIT_T, parent=0, label="t"),
        PacketSegment(e, g.v, g.sigma, amp=SPLIT_T, phase=SPLIT_R_PHASE, parent=0, label="r"),
    )
    spectator = PacketHistory((PacketSegment(Event(e.t, 0.0), 0.0, g.sigma, label="spectator"),))
    w = g.window_halfwidth
    return MultiTimeWaveFunction(
        (Branch(1.0, (PacketHistory(segs), spectator), (UP, UP)),),
        (g.mass, g.mass),
        (FieldWindow(0, e, w, w),),
        label="splitter",
    )


def quantile_position(center: float, sigma: float, direction: float, q):
    """Position of quantile ``q`` of a Gaussian packet, counted toward ``direction``.

    q = 1 is the leading edge of a packet moving in ``direction``.
    """
    return center + math.copysign(1.0, direction) * sigma * norm.ppf(q)


def splitter_fate_rule(q) -> np.ndarray:
    """Quantile rule: the leading half of an arriving packet is transmitted."""
    return np.where(np.asarray(q) > 0.5, "transmitted", "reflected")


# ---------------------------------------------------------------------------
# classification


@dataclass
class Classification:
    outcomes: list[Outcome]
    signs: np.ndarray  # (N, 2) in {-1, 0, +1}; 0 = ambiguous
    counts: dict[str, int] = field(default_factory=dict)

    def frequencies(self) -> dict[str, float]:
        n = max(len(self.outcomes), 1)
        return {o.value: self.counts.get(o.value, 0) / n for o in JOINT_OUTCOMES}


def classify(z, axis_z: float, margin: float) -> Classification:
    """Read outcomes from final positions ``z`` (N, 2) relative to ``axis_z``.

    Positions closer than ``margin`` to the axis are ambiguous.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float)) - axis_z
    signs = np.where(np.abs(z) < margin, 0, np.sign(z)).astype(int)
    outs = [
        Outcome.AMBIGUOUS if 0 in (s1, s2) else Outcome.from_signs(s1, s2) for s1, s2 in signs
    ]
    counts = {}
    for o in outs:
        counts[o.value] = counts.get(o.value, 0) + 1
    return Classification(outs, signs, counts)


def exit_amplitudes(wf: MultiTimeWaveFunction) -> dict[tuple[int, ...], np.ndarray]:
    """Joint amplitude (spinor vector) of each combination of exit directions.

    Leaves of every packet history are grouped by the sign of their velocity;
    leaves sharing a sign must be the same packet (coincident exit beams),
    so their coefficients add.  This is pure branch algebra: no integration.
    """
    acc: dict[tuple[int, ...], np.ndarray] = {}
    reference: dict[tuple[int, int], PacketSegment] = {}
    for br in wf.branches:
        per_particle = []
        for k, h in enumerate(br.packets):
            parents = {s.parent for s in h.segments if s.parent is not None}
            leaves = []
            for i, s in enumerate(h.segments):
                if i in parents:
                    continue
                sign = int(np.sign(s.v))
                ref = reference.setdefault((k, sign), s)
                if (ref.birth, ref.v, ref.sigma) != (s.birth, s.v, s.sigma):
                    raise ValueError(f"exit beams of particle {k} with sign {sign} do not coincide")
                leaves.append((sign, s.amp * np.exp(1j * s.phase)))
            per_particle.append(leaves)
        for combo in np.ndindex(*[len(p) for p in per_particle]):
            key = tuple(per_particle[k][i][0] for k, i in enumerate(combo))
            amp = br.coeff * np.prod([per_particle[k][i][1] for k, i in enumerate(combo)])
            acc[key] = acc.get(key, 0) + amp * br.joint_spinor
    return acc


def joint_probabilities(wf: MultiTimeWaveFunction) -> dict[str, float]:
    """Born-rule joint outcome probabilities from :func:`exit_amplitudes`."""
    amps = exit_amplitudes(wf)
    out = {o.value: 0.0 for o in JOINT_OUTCOMES}
    for (s1, s2), vec in amps.items():
        out[Outcome.from_signs(s1, s2).value] += float(np.vdot(vec, vec).real)
    return out


def hsz_joint_probabilities(phi: float, chi: float) -> dict[str, float]:
    """Closed form: P(++) = P(--) = (1 + cos(chi - phi))/4, P(+-) = P(-+) = (1 - cos)/4."""
    c = math.cos(chi - phi)
    return {"++": (1 + c) / 4, "+-": (1 - c) / 4, "-+": (1 - c) / 4, "--": (1 + c) / 4}


# ---------------------------------------------------------------------------
# experiment bundles


@dataclass(frozen=True)
class Experiment:
    """A built wave function plus what is needed to run and read it out.

    ``horizon`` holds per-particle stop times (build frame); outcomes are the
    signs of the final positions relative to ``axis_z``.
    """

    kind: str
    wf: MultiTimeWaveFunction
    horizon: tuple[float, float]
    axis_z: float
    margin: float
    geometry: object

    def classify(self, z) -> Classification:
        return classify(z, self.axis_z, self.margin)

    def expected(self) -> dict[str, float]:
        if self.kind == "hsz":
            return hsz_joint_probabilities(self.geometry.phi, self.geometry.chi)
        return joint_probabilities(self.wf)


def hsz_experiment(g: HszGeometry | None = None) -> Experiment:
    g = g or HszGeometry()
    return Experiment("hsz", build_hsz(g), (g.t_nu, g.t_nu), g.emission.z, g.sigma, g)


def epr_experiment(g: EprGeometry | None = None) -> Experiment:
    g = g or EprGeometry()
    return Experiment("epr", build_epr(g), (g.t_end, g.t_end), g.emission.z, g.sigma, g)


def splitter_experiment(g: SplitterGeometry | None = None) -> Experiment:
    g = g or SplitterGeometry()
    w = g.window_halfwidth
    horizon = g.event.t + w
    return Experiment("splitter", build_single_splitter(g), (horizon, horizon), g.event.z, 0.0, g)
