"""Multi-time wave functions built from rigid Gaussian packet histories.

A wave function is a finite sum of branches.  Each branch carries a complex
coefficient, one :class:`PacketHistory` per particle and one constant spinor
per particle.  A packet history is a small tree of :class:`PacketSegment`
objects: a root segment that extends into the past, and children born on the
end event of their parent (mirrors continue a packet, splitters fork it).
Its value at an event is the sum over every segment valid there.

Segment and window boundaries are simultaneity lines of the apparatus frame
(``surface_v`` is the apparatus velocity in the current description), so a
boosted wave function is an exact passive transformation of the original.

Every evaluation routine comes in two flavours: a scalar one taking a
:class:`~mtbohm.spacetime.ConfigPoint`, and an ``*_many`` one taking arrays
``t, z`` of shape ``(N, n_particles)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property, reduce

import numpy as np

from ._kernels import segment_sums
from .spacetime import (
    Boost,
    ConfigPoint,
    Event,
    SuperluminalError,
    boost_coords,
    boost_event,
    compose_velocities,
    gamma,
    velocity_add,
)

NODE_FACTOR = 1e-12

PAULI = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)


class CoverageError(ValueError):
    """An event lies outside every segment of a packet history."""


class NodeError(ArithmeticError):
    """The density at a configuration point is below the node threshold."""


def gaussian_norm(sigma):
    return (2.0 * math.pi * np.square(sigma)) ** -0.25


@dataclass(frozen=True)
class PacketSegment:
    """One inertial stretch of a rigid Gaussian packet.

    ``birth`` is the packet centre at the start of the segment and ``t_end``
    the particle time (on the centre worldline) at which it stops.  Root
    segments (``parent is None``) are valid for all times up to ``t_end``.
    """

    birth: Event
    v: float
    sigma: float
    amp: float = 1.0
    phase: float = 0.0
    t_end: float = math.inf
    parent: int | None = None
    surface_v: float = 0.0
    label: str = ""

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"packet width must be positive, got {self.sigma}")
        if not abs(self.v) < 1:
            raise SuperluminalError(f"group velocity must satisfy |v| < 1, got {self.v}")
        if not abs(self.surface_v) < 1:
            raise ValueError("apparatus velocity must satisfy |w| < 1")
        if not self.t_end > self.birth.t and self.parent is not None:
            raise ValueError("segment validity interval is empty")

    def center(self, t):
        return self.birth.z + self.v * (np.asarray(t) - self.birth.t)

    @property
    def end_event(self) -> Event | None:
        if math.isinf(self.t_end):
            return None
        return Event(self.t_end, float(self.center(self.t_end)))

    def valid(self, t, z):
        """Boolean mask of events inside this segment's validity region."""
        t = np.asarray(t, dtype=float)
        z = np.asarray(z, dtype=float)
        w = self.surface_v
        ok = np.ones(np.broadcast(t, z).shape, dtype=bool)
        if self.parent is not None:
            ok &= (t - self.birth.t) - w * (z - self.birth.z) > 0
        end = self.end_event
        if end is not None:
            ok &= (t - end.t) - w * (z - end.z) <= 0
        return ok

    def amplitude(self, t, z, mass: float = 1.0, deriv: bool = False):
        """Packet value ignoring validity; optionally also d/dz."""
        offset = np.asarray(z) - self.center(t)
        p = mass * gamma(self.v) * self.v
        val = (
            self.amp
            * gaussian_norm(self.sigma)
            * np.exp(-offset**2 / (4 * self.sigma**2) + 1j * (p * offset + self.phase))
        )
        if not deriv:
            return val
        return val, val * (-offset / (2 * self.sigma**2) + 1j * p)

    def boosted(self, b: Boost) -> "PacketSegment":
        """The same packet described from a frame moving at ``b``.

        The rest-frame width is invariant, so sigma scales with 1/gamma.  The
        amplitude is rescaled so that packet magnitudes transform as scalars:
        |new(boosted event)| == |old(event)|.
        """
        v2 = velocity_add(self.v, b)
        sigma2 = float(self.sigma * gamma(self.v) / gamma(v2))
        end = self.end_event
        return replace(
            self,
            birth=boost_event(self.birth, b),
            v=float(v2),
            sigma=sigma2,
            amp=float(self.amp * gaussian_norm(self.sigma) / gaussian_norm(sigma2)),
            t_end=math.inf if end is None else boost_event(end, b).t,
            surface_v=float(velocity_add(self.surface_v, b)),
        )


def packet_amplitude(seg: PacketSegment, e: Event, mass: float = 1.0) -> complex:
    if not seg.valid(e.t, e.z):
        raise CoverageError(f"event {e} outside segment {seg.label or seg}")
    return complex(seg.amplitude(e.t, e.z, mass))


@dataclass(frozen=True)
class PacketHistory:
    segments: tuple[PacketSegment, ...]

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("packet history needs at least one segment")
        for i, s in enumerate(segs):
            if s.parent is None:
                continue
            if not 0 <= s.parent < i:
                raise ValueError("segments must be listed parents first")
            end = segs[s.parent].end_event
            if end is None:
                raise ValueError(f"segment {i} is born from an open-ended parent")
            if abs(end.t - s.birth.t) > 1e-9 or abs(end.z - s.birth.z) > 1e-9:
                raise ValueError(f"segment {i} is not born on its parent's end event")
            if abs(segs[s.parent].surface_v - s.surface_v) > 1e-12:
                raise ValueError("parent and child must share their boundary surface")

    def boosted(self, b: Boost) -> "PacketHistory":
        return PacketHistory(tuple(s.boosted(b) for s in self.segments))

    def covers(self, t, z):
        return reduce(np.logical_or, (s.valid(t, z) for s in self.segments))

    def active(self, e: Event) -> list[PacketSegment]:
        return [s for s in self.segments if s.valid(e.t, e.z)]


@dataclass(frozen=True)
class Spinor:
    """Two complex components in the z basis, normalised."""

    up: complex
    down: complex

    def __post_init__(self):
        n = abs(self.up) ** 2 + abs(self.down) ** 2
        if abs(n - 1) > 1e-12:
            raise ValueError(f"spinor must have unit norm, got {n}")

    @classmethod
    def normalized(cls, up, down) -> "Spinor":
        n = math.sqrt(abs(up) ** 2 + abs(down) ** 2)
        return cls(complex(up) / n, complex(down) / n)

    @classmethod
    def along(cls, axis, sign: int = +1) -> "Spinor":
        """Eigenspinor of n.sigma with eigenvalue ``sign``."""
        n = np.asarray(axis, dtype=float)
        n = n / np.linalg.norm(n)
        vals, vecs = np.linalg.eigh(np.einsum("i,ijk->jk", n, PAULI))
        vec = vecs[:, int(np.argmax(vals)) if sign > 0 else int(np.argmin(vals))]
        # fix the global phase so the first non-negligible component is real positive
        lead = vec[0] if abs(vec[0]) > 1e-12 else vec[1]
        vec = vec * abs(lead) / lead
        return cls.normalized(vec[0], vec[1])

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.up, self.down], dtype=complex)


UP = Spinor(1, 0)
DOWN = Spinor(0, 1)


@dataclass(frozen=True)
class Branch:
    coeff: complex
    packets: tuple[PacketHistory, ...]
    spinors: tuple[Spinor, ...]

    def __post_init__(self):
        object.__setattr__(self, "packets", tuple(self.packets))
        object.__setattr__(self, "spinors", tuple(self.spinors))
        if not np.isfinite(self.coeff):
            raise ValueError("branch coefficient must be finite")
        if len(self.packets) != len(self.spinors):
            raise ValueError("need one packet history and one spinor per particle")

    @cached_property
    def joint_spinor(self) -> np.ndarray:
        return reduce(np.kron, (s.vector for s in self.spinors))


@dataclass(frozen=True)
class FieldWindow:
    """Stretch of particle ``k``'s time around an interaction where packets overlap.

    Inside it guidance switches to field mode.  ``before``/``after`` are
    apparatus proper times measured from ``event``.
    """

    k: int
    event: Event
    before: float
    after: float
    surface_v: float = 0.0

    def contains(self, t, z):
        w = self.surface_v
        s = gamma(w) * ((t - self.event.t) - w * (z - self.event.z))
        return (s >= -self.before) & (s <= self.after)

    def boosted(self, b: Boost) -> "FieldWindow":
        return replace(
            self,
            event=boost_event(self.event, b),
            surface_v=float(velocity_add(self.surface_v, b)),
        )


@dataclass(frozen=True)
class MultiTimeWaveFunction:
    """Sum of branches; immutable.

    ``frame`` is the velocity of the describing frame relative to the frame
    the wave function was built in; ``base`` keeps the build-frame original so
    field-mode guidance can be evaluated there.
    """

    branches: tuple[Branch, ...]
    masses: tuple[float, ...]
    windows: tuple[FieldWindow, ...] = ()
    frame: float = 0.0
    label: str = ""
    base: "MultiTimeWaveFunction | None" = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        object.__setattr__(self, "windows", tuple(self.windows))
        if not self.branches:
            raise ValueError("wave function needs at least one branch")
        for b in self.branches:
            if len(b.packets) != len(self.masses):
                raise ValueError("every branch needs one packet history per particle")

    @property
    def n_particles(self) -> int:
        return len(self.masses)

    @property
    def build_frame(self) -> "MultiTimeWaveFunction":
        return self if self.base is None else self.base

    @cached_property
    def node_scale(self) -> float:
        """Peak of the largest incoherent branch product; nodes are relative to it."""
        best = 0.0
        for b in self.branches:
            prod = abs(b.coeff) ** 2
            for h in b.packets:
                prod *= max(s.amp**2 * gaussian_norm(s.sigma) ** 2 for s in h.segments)
            best = max(best, prod)
        return best

    @cached_property
    def _layouts(self) -> tuple:
        return tuple(_layout(self, k) for k in range(self.n_particles))

    @property
    def node_threshold(self) -> float:
        return NODE_FACTOR * self.node_scale

    def in_window(self, k: int, t, z):
        mask = np.zeros(np.broadcast(t, z).shape, dtype=bool)
        for w in self.windows:
            if w.k == k:
                mask |= w.contains(t, z)
        return mask


# ---------------------------------------------------------------------------
# vectorised core


@dataclass
class _Factors:
    """Per-branch, per-particle packet sums at a batch of points."""

    h: np.ndarray  # (B, n, N) complex
    dh: np.ndarray | None  # (B, n, N) complex
    vdom: np.ndarray  # (B, n, N) velocity of the dominant valid segment
    covered: np.ndarray  # (n, N) bool


def _as_batch(t, z):
    t = np.atleast_2d(np.asarray(t, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if t.shape != z.shape:
        raise ValueError("t and z must have the same shape")
    return t, z


@dataclass
class _Layout:
    """All segments of one particle, across branches, as flat arrays.

    Segments are stored branch by branch; ``bounds[b]:bounds[b + 1]`` is the
    slice belonging to branch ``b``.
    """

    bt: np.ndarray
    bz: np.ndarray
    v: np.ndarray
    p: np.ndarray  # m * gamma(v) * v
    inv4s2: np.ndarray  # 1 / (4 sigma^2)
    inv2s2: np.ndarray  # 1 / (2 sigma^2)
    scale: np.ndarray  # amp * Gaussian normalisation
    phase: np.ndarray
    rooted: np.ndarray  # True for root segments (no start boundary)
    et: np.ndarray
    ez: np.ndarray
    w: np.ndarray
    bounds: np.ndarray


def _layout(wf: MultiTimeWaveFunction, k: int) -> _Layout:
    segs = [s for b in wf.branches for s in b.packets[k].segments]
    sizes = [len(b.packets[k].segments) for b in wf.branches]
    m = wf.masses[k]

    def arr(f, dtype=float):
        return np.array([f(s) for s in segs], dtype=dtype)

    ends = [s.end_event for s in segs]
    return _Layout(
        bt=arr(lambda s: s.birth.t),
        bz=arr(lambda s: s.birth.z),
        v=arr(lambda s: s.v),
        p=arr(lambda s: m * gamma(s.v) * s.v),
        inv4s2=arr(lambda s: 1 / (4 * s.sigma**2)),
        inv2s2=arr(lambda s: 1 / (2 * s.sigma**2)),
        scale=arr(lambda s: s.amp * gaussian_norm(s.sigma)),
        phase=arr(lambda s: s.phase),
        rooted=arr(lambda s: s.parent is None, bool),
        et=np.array([math.inf if e is None else e.t for e in ends]),
        ez=np.array([0.0 if e is None else e.z for e in ends]),
        w=arr(lambda s: s.surface_v),
        bounds=np.concatenate([[0], np.cumsum(sizes)]),
    )


def _factors(wf: MultiTimeWaveFunction, t, z, deriv: bool = False, phases: bool = True) -> _Factors:
    """Per-branch packet sums at points ``(t, z)`` of shape (N, n).

    With ``phases=False`` only magnitudes are summed (sum of |segment|), which
    is all kinematic guidance needs and avoids the complex exponential.
    """
    N, n = t.shape
    B = len(wf.branches)
    h = np.empty((B, n, N), dtype=complex if phases else float)
    dh = np.empty((B, n, N), dtype=complex) if deriv else None
    vdom = np.empty((B, n, N))
    covered = np.empty((n, N), dtype=bool)
    for k in range(n):
        L = wf._layouts[k]
        hk, dhk, vdom[:, k], covered[k] = segment_sums(
            np.ascontiguousarray(t[:, k]),
            np.ascontiguousarray(z[:, k]),
            L.bt, L.bz, L.v, L.p, L.inv4s2, L.inv2s2, L.scale, L.phase,
            L.rooted, L.et, L.ez, L.w, L.bounds, phases, deriv,
        )
        h[:, k] = hk if phases else hk.real
        if deriv:
            dh[:, k] = dhk
    return _Factors(h, dh, vdom, covered)


def _factors_numpy(wf: MultiTimeWaveFunction, t, z, deriv: bool = False, phases: bool = True) -> _Factors:
    """Reference implementation of :func:`_factors` in plain numpy."""
    N, n = t.shape
    B = len(wf.branches)
    h = np.zeros((B, n, N), dtype=complex if phases else float)
    dh = np.zeros((B, n, N), dtype=complex) if deriv else None
    vdom = np.zeros((B, n, N))
    covered = np.ones((n, N), dtype=bool)
    for k in range(n):
        L = wf._layouts[k]
        tk, zk = t[:, k], z[:, k]
        w = L.w[:, None]
        dt = tk - L.bt[:, None]
        dzb = zk - L.bz[:, None]
        ok = ((tk - L.et[:, None]) - w * (zk - L.ez[:, None])) <= 0
        ok &= L.rooted[:, None] | (dt - w * dzb > 0)
        covered[k] = ok.any(axis=0)
        rows = np.flatnonzero(ok.any(axis=1))
        off = dzb[rows] - L.v[rows, None] * dt[rows]
        if phases:
            arg = -(off**2) * L.inv4s2[rows, None] + 1j * (L.p[rows, None] * off + L.phase[rows, None])
        else:
            arg = -(off**2) * L.inv4s2[rows, None]
        a = np.where(ok[rows], L.scale[rows, None] * np.exp(arg), 0)
        full = np.zeros((len(L.v), N), dtype=h.dtype)
        full[rows] = a
        h[:, k] = np.add.reduceat(full, L.bounds[:-1], axis=0)
        if deriv:
            da = a * (-off * L.inv2s2[rows, None] + 1j * L.p[rows, None])
            full[:] = 0
            full[rows] = da
            dh[:, k] = np.add.reduceat(full, L.bounds[:-1], axis=0)
        mag = np.full((len(L.v), N), -1.0)
        mag[rows] = np.where(ok[rows], np.abs(a), -1.0)
        for bi in range(B):
            lo, hi = L.bounds[bi], L.bounds[bi + 1]
            if hi - lo == 1:
                vdom[bi, k] = L.v[lo]
            else:
                vdom[bi, k] = L.v[lo + np.argmax(mag[lo:hi], axis=0)]
    return _Factors(h, dh, vdom, covered)


def _check_covered(f: _Factors):
    if not f.covered.all():
        k = int(np.argwhere(~f.covered)[0, 0])
        raise CoverageError(f"time coordinate of particle {k} outside its packet history")


def _spinors(wf) -> np.ndarray:
    return np.array([b.joint_spinor for b in wf.branches])  # (B, 2**n)


def _coeffs(wf) -> np.ndarray:
    return np.array([b.coeff for b in wf.branches], dtype=complex)


def _psi(wf, f: _Factors) -> np.ndarray:
    scal = _coeffs(wf)[:, None] * np.prod(f.h, axis=1)  # (B, N)
    return scal.T @ _spinors(wf)  # (N, 2**n)


def _dpsi(wf, f: _Factors, k: int) -> np.ndarray:
    h = f.h.copy()
    h[:, k] = f.dh[:, k]
    scal = _coeffs(wf)[:, None] * np.prod(h, axis=1)
    return scal.T @ _spinors(wf)


def evaluate_many(wf: MultiTimeWaveFunction, t, z) -> np.ndarray:
    """Spinor-valued amplitude, shape (N, 2**n)."""
    t, z = _as_batch(t, z)
    f = _factors(wf, t, z)
    _check_covered(f)
    return _psi(wf, f)


def density_many(wf, t, z) -> np.ndarray:
    psi = evaluate_many(wf, t, z)
    return np.sum(np.abs(psi) ** 2, axis=1)


def branch_weights_many(wf, t, z) -> np.ndarray:
    """Incoherent branch weights normalised across branches, shape (N, B)."""
    t, z = _as_batch(t, z)
    f = _factors(wf, t, z)
    _check_covered(f)
    w = np.abs(_coeffs(wf)[:, None] * np.prod(f.h, axis=1)) ** 2
    tot = w.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (w / tot).T


def _kinematic_from(f: _Factors, wf, k: int) -> np.ndarray:
    w = np.abs(_coeffs(wf)[:, None] * np.prod(f.h, axis=1)) ** 2
    dom = np.argmax(w, axis=0)
    return f.vdom[dom, k, np.arange(w.shape[1])]


def _field_from(f: _Factors, wf, k: int, psi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    dpsi = _dpsi(wf, f, k)
    u = np.imag(np.sum(np.conj(psi) * dpsi, axis=1)) / (wf.masses[k] * rho)
    # u is the spatial part of the four-velocity; coordinate velocity follows
    return u / np.sqrt(1.0 + u * u)


def field_velocity_many(wf: MultiTimeWaveFunction, t, z, k: int) -> np.ndarray:
    """Field-mode velocity, always evaluated in the build frame."""
    t, z = _as_batch(t, z)
    if wf.base is not None:
        t0, z0 = boost_coords(t, z, -wf.frame)
        v0 = field_velocity_many(wf.base, t0, z0, k)
        return velocity_add(v0, wf.frame)
    f = _factors(wf, t, z, deriv=True)
    _check_covered(f)
    psi = _psi(wf, f)
    rho = np.sum(np.abs(psi) ** 2, axis=1)
    if np.any(rho < wf.node_threshold):
        raise NodeError("density below node threshold")
    v = _field_from(f, wf, k, psi, rho)
    if np.any(np.abs(v) >= 1):
        raise SuperluminalError("field-mode velocity is not time-like")
    return v


def kinematic_velocity_many(wf, t, z, k: int) -> np.ndarray:
    t, z = _as_batch(t, z)
    f = _factors(wf, t, z)
    _check_covered(f)
    return _kinematic_from(f, wf, k)


def spin_vectors_many(wf, t, z) -> np.ndarray:
    """Spin 3-vectors for every particle, shape (N, n, 3)."""
    t, z = _as_batch(t, z)
    psi = evaluate_many(wf, t, z)
    return _spin_from_psi(psi, t.shape[1])


def _spin_from_psi(psi: np.ndarray, n: int) -> np.ndarray:
    N = psi.shape[0]
    rho = np.sum(np.abs(psi) ** 2, axis=1)
    shaped = psi.reshape((N,) + (2,) * n)
    out = np.empty((N, n, 3))
    for k in range(n):
        moved = np.moveaxis(shaped, k + 1, 1).reshape(N, 2, -1)  # (N, 2, rest)
        # <psi| sigma_a (x) 1 |psi>
        sp = np.einsum("nir,aij,njr->na", np.conj(moved), PAULI, moved)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, k] = np.real(sp) / rho[:, None]
    return out


# ---------------------------------------------------------------------------
# scalar API


def _point_arrays(p: ConfigPoint):
    return p.t[None, :], p.z[None, :]


def evaluate(wf: MultiTimeWaveFunction, p: ConfigPoint) -> np.ndarray:
    return evaluate_many(wf, *_point_arrays(p))[0]


def density(wf: MultiTimeWaveFunction, p: ConfigPoint) -> float:
    return float(density_many(wf, *_point_arrays(p))[0])


def branch_weights(wf: MultiTimeWaveFunction, p: ConfigPoint) -> np.ndarray:
    w = branch_weights_many(wf, *_point_arrays(p))[0]
    if not np.all(np.isfinite(w)):
        raise NodeError("all branch weights vanish at this point")
    return w


def effective_branch(wf, p: ConfigPoint, tol: float = 1e-6) -> int | None:
    """Index of the branch carrying all but ``tol`` of the weight, if any."""
    w = branch_weights(wf, p)
    i = int(np.argmax(w))
    return i if w[i] > 1 - tol else None


def _require_density(wf, p: ConfigPoint):
    if density(wf, p) < wf.node_threshold:
        raise NodeError(f"density at {p} below node threshold")


def guidance_velocity(wf, p: ConfigPoint, k: int, mode: str = "kinematic") -> float:
    """Velocity of particle ``k`` at ``p``.

    ``mode`` is ``"kinematic"`` (group velocity of the packet covering p),
    ``"field"`` (current-based, build-frame) or ``"auto"`` (field inside the
    interaction windows of particle k, kinematic elsewhere).
    """
    _require_density(wf, p)
    t, z = _point_arrays(p)
    if mode == "auto":
        mode = "field" if wf.in_window(k, t[0, k], z[0, k]) else "kinematic"
    if mode == "kinematic":
        return float(kinematic_velocity_many(wf, t, z, k)[0])
    if mode == "field":
        return float(field_velocity_many(wf, t, z, k)[0])
    raise ValueError(f"unknown guidance mode {mode!r}")


def spin_vector(wf, p: ConfigPoint, k: int) -> np.ndarray:
    _require_density(wf, p)
    return spin_vectors_many(wf, *_point_arrays(p))[0, k]


def boost_wavefunction(wf: MultiTimeWaveFunction, b: Boost) -> MultiTimeWaveFunction:
    if b.beta == 0.0:
        return wf
    branches = tuple(
        replace(br, packets=tuple(h.boosted(b) for h in br.packets)) for br in wf.branches
    )
    return replace(
        wf,
        branches=branches,
        windows=tuple(w.boosted(b) for w in wf.windows),
        frame=compose_velocities(wf.frame, b.beta),
        base=wf.build_frame,
    )


@dataclass
class GuidanceSample:
    """Everything the integrator needs at a batch of points, without raising."""

    v: np.ndarray  # (N, n)
    rho: np.ndarray  # (N,)
    node: np.ndarray  # (N,) density below threshold
    field: np.ndarray  # (N, n) field mode was used
    spin: np.ndarray | None = None  # (N, n, 3)


def sample_guidance(wf: MultiTimeWaveFunction, t, z, want_spin: bool = False) -> GuidanceSample:
    """Velocities, density and node flags at a batch of points; never raises on nodes.

    Rows with no particle inside a field window use kinematic guidance, which
    needs only packet magnitudes; there ``rho`` is the incoherent density
    sum_b |c_b|^2 prod_k (sum_s |segment|)^2.  Rows with a particle inside a
    window are evaluated on the build-frame wave function (``rho`` is the
    coherent density there) and velocities are transformed into the
    describing frame.  Both quantities are frame independent, so node
    decisions and velocities agree across frames up to round-off.
    """
    t, z = _as_batch(t, z)
    N, n = t.shape
    base = wf.build_frame
    in_win = np.stack([wf.in_window(k, t[:, k], z[:, k]) for k in range(n)], axis=1)
    any_win = in_win.any(axis=1)
    v = np.empty((N, n))
    rho = np.empty(N)
    c2 = np.abs(_coeffs(wf)) ** 2

    quick = np.flatnonzero(~any_win)
    if quick.size:
        f = _factors(wf, t[quick], z[quick], phases=False)
        _check_covered(f)
        w = c2[:, None] * np.prod(f.h**2, axis=1)
        dom = np.argmax(w, axis=0)
        v[quick] = f.vdom[dom, :, np.arange(quick.size)]
        rho[quick] = w.sum(axis=0)

    need = any_win | want_spin
    rows = np.flatnonzero(need)
    spin = np.zeros((N, n, 3)) if want_spin else None
    if rows.size:
        t0, z0 = t[rows], z[rows]
        if wf.base is not None:
            t0, z0 = boost_coords(t0, z0, -wf.frame)
        win = any_win[rows]
        f0 = _factors(base, t0, z0, deriv=True)
        _check_covered(f0)
        psi0 = _psi(base, f0)
        rho0 = np.sum(np.abs(psi0) ** 2, axis=1)
        if want_spin:
            spin[rows] = _spin_from_psi(psi0, n)
        if win.any():
            wr = rows[win]
            rho[wr] = rho0[win]
            with np.errstate(invalid="ignore", divide="ignore"):
                for k in range(n):
                    vk = np.where(
                        in_win[wr, k],
                        _field_from(f0, base, k, psi0, rho0)[win],
                        _kinematic_from(f0, base, k)[win],
                    )
                    if wf.base is not None:
                        vk = (vk - wf.frame) / (1.0 - vk * wf.frame)
                    v[wr, k] = vk
    node = ~(rho >= base.node_threshold)
    return GuidanceSample(v=v, rho=rho, node=node, field=in_win, spin=spin)
