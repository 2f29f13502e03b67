"""Integration of configuration space-time trajectories.

A trajectory is advanced under a coordination rule:

* :class:`InvariantProperTime` moves every particle by the same proper time
  ``dtau`` per row, so each particle's step satisfies dt**2 - dz**2 = dtau**2.
* :class:`FrameEqualTime` moves every particle by the same coordinate time
  ``dt`` of a chosen inertial frame (the preferred-frame and equal-time
  hypersurface rules used for contrast).

The scheme is explicit midpoint in the rule parameter with dyadic step
control: the nominal step (``dtau`` or ``dt``) is halved, up to ``MAX_DEPTH``
times, wherever the rapidity changes by more than ``tol`` per unit step or the
step would hit a node or a space-like velocity, and grows back once the motion
is smooth again.  Rapidity differences are boost invariant, so the same steps
are taken in every frame.  All trajectories of a batch share one wave
function and one rule and are advanced together as numpy arrays; each row of
a trajectory depends only on that trajectory.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .spacetime import Boost, ConfigPoint, boost_coords, compose_velocities, gamma
from .wavefunction import MultiTimeWaveFunction, boost_wavefunction, sample_guidance

log = logging.getLogger(__name__)

MAX_DEPTH = 10
DEFAULT_TOL = 2e-3


@dataclass(frozen=True)
class InvariantProperTime:
    dtau: float = 1e-3

    def __post_init__(self):
        if not self.dtau > 0:
            raise ValueError("dtau must be positive")

    @property
    def step(self) -> float:
        return self.dtau

    def describe(self) -> dict:
        return {"kind": "proper_time", "dtau": self.dtau}


@dataclass(frozen=True)
class FrameEqualTime:
    dt: float = 1e-3
    beta: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not abs(self.beta) < 1:
            raise ValueError("rule frame velocity must satisfy |beta| < 1")

    @property
    def step(self) -> float:
        return self.dt

    def describe(self) -> dict:
        return {"kind": "equal_time", "dt": self.dt, "beta": self.beta}


CoordinationRule = InvariantProperTime | FrameEqualTime


def rule_from_dict(d: dict) -> CoordinationRule:
    kind = d.get("kind", "proper_time")
    if kind == "proper_time":
        return InvariantProperTime(float(d.get("dtau", 1e-3)))
    if kind == "equal_time":
        return FrameEqualTime(float(d.get("dt", d.get("dtau", 1e-3))), float(d.get("beta", 0.0)))
    raise ValueError(f"unknown coordination rule {kind!r}")


class IntegrationError(RuntimeError):
    pass


@dataclass
class TrajectoryTable:
    """The look-up table: coordinated events and spin vectors, one row per step.

    ``h`` holds the rule step that produced each row (0 for the initial row);
    it differs from the nominal step only after node-triggered halving.
    ``meta['frame']`` is the velocity of the describing frame relative to
    the frame the experiment was built in.
    """

    t: np.ndarray  # (R, n)
    z: np.ndarray  # (R, n)
    spin: np.ndarray  # (R, n, 3)
    h: np.ndarray  # (R,)
    meta: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.t.shape[0]

    @property
    def n_particles(self) -> int:
        return self.t.shape[1]

    @property
    def status(self) -> str:
        return self.meta.get("status", "ok")

    @property
    def frame(self) -> float:
        return self.meta.get("frame", 0.0)

    def point(self, row: int) -> ConfigPoint:
        return ConfigPoint.from_arrays(self.t[row], self.z[row])

    def build_frame_coords(self):
        """Rows re-expressed in the build frame."""
        if self.frame == 0.0:
            return self.t, self.z
        return boost_coords(self.t, self.z, -self.frame)

    def write_csv(self, path, digits: int = 12):
        write_table_csv(self, path, digits)


# ---------------------------------------------------------------------------
# stepping


def _build_time(wf: MultiTimeWaveFunction, t, z):
    if wf.frame == 0.0:
        return t
    return boost_coords(t, z, -wf.frame)[0]


@dataclass
class _Step:
    t: np.ndarray
    z: np.ndarray
    sample: object  # GuidanceSample at the new state
    bad: np.ndarray  # node hit at midpoint or endpoint
    superluminal: np.ndarray
    err: np.ndarray  # h * max |rapidity change| over the half step


def _displacement(rule, v, h, movable):
    h = np.broadcast_to(np.asarray(h, dtype=float).reshape(-1, 1), v.shape)
    if isinstance(rule, InvariantProperTime):
        dt = gamma(np.clip(v, -1 + 1e-16, 1 - 1e-16)) * h
    else:
        dt = h.copy()
    dt = np.where(movable, dt, 0.0)
    return dt, v * dt


def _advance(wf, rule, t, z, s0, movable, h, want_spin) -> _Step:
    """One midpoint step of size h from (t, z) where ``s0`` was sampled."""
    dt, dz = _displacement(rule, s0.v, 0.5 * h, movable)
    sm = sample_guidance(wf, t + dt, z + dz)
    dt, dz = _displacement(rule, sm.v, h, movable)
    t1, z1 = t + dt, z + dz
    s1 = sample_guidance(wf, t1, z1, want_spin=want_spin)
    sup = np.any((np.abs(sm.v) >= 1) & movable, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        deta = np.abs(np.arctanh(np.clip(sm.v, -1 + 1e-16, 1 - 1e-16)) - np.arctanh(np.clip(s0.v, -1 + 1e-16, 1 - 1e-16)))
    err = np.asarray(h) * np.max(np.where(movable, np.nan_to_num(deta, nan=np.inf), 0.0), axis=1)
    return _Step(t1, z1, s1, sm.node | s1.node, sup, err)


def _rows_subset(s, idx):
    return replace(
        s,
        v=s.v[idx],
        rho=s.rho[idx],
        node=s.node[idx],
        field=s.field[idx],
        spin=None if s.spin is None else s.spin[idx],
    )


class _Recorder:
    def __init__(self, enabled, n):
        self.enabled = enabled
        self.n = n
        self.blocks = []

    def add(self, idx, t, z, spin, h):
        if self.enabled:
            idx = np.asarray(idx)
            h = np.broadcast_to(np.asarray(h, dtype=float), idx.shape).copy()
            self.blocks.append((idx, t.copy(), z.copy(), spin.copy(), h))

    def tables(self, n_traj):
        idx = np.concatenate([b[0] for b in self.blocks])
        t = np.concatenate([b[1] for b in self.blocks])
        z = np.concatenate([b[2] for b in self.blocks])
        sp = np.concatenate([b[3] for b in self.blocks])
        h = np.concatenate([b[4] for b in self.blocks])
        order = np.argsort(idx, kind="stable")
        counts = np.bincount(idx, minlength=n_traj)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        out = []
        for i in range(n_traj):
            sl = order[bounds[i] : bounds[i + 1]]
            out.append((t[sl], z[sl], sp[sl], h[sl]))
        return out


@dataclass
class BatchResult:
    """Final state of a batch integration plus optional tables."""

    t: np.ndarray  # (N, n) last coordinated events, describing frame of the rule
    z: np.ndarray
    status: list[str]
    steps: np.ndarray
    frame: float
    tables: list[TrajectoryTable] | None = None

    def build_frame_coords(self):
        if self.frame == 0.0:
            return self.t, self.z
        return boost_coords(self.t, self.z, -self.frame)


def integrate_many(
    wf: MultiTimeWaveFunction,
    t0,
    z0,
    rule: CoordinationRule,
    horizon,
    *,
    record: bool = True,
    want_spin: bool | None = None,
    max_steps: int | None = None,
    tol: float = DEFAULT_TOL,
    experiment: str = "",
) -> BatchResult:
    """Integrate N trajectories from starts ``(t0, z0)`` of shape (N, n).

    ``horizon`` holds per-particle stop times in the build frame.  A particle
    whose build-frame time reaches its horizon is frozen while the others
    continue.  Starts are expressed in the describing frame of ``wf``; for a
    :class:`FrameEqualTime` rule everything is first boosted into the rule's
    frame and the result is expressed there.
    """
    t0 = np.atleast_2d(np.asarray(t0, dtype=float)).copy()
    z0 = np.atleast_2d(np.asarray(z0, dtype=float)).copy()
    N, n = t0.shape
    horizon = np.broadcast_to(np.asarray(horizon, dtype=float), (n,))
    want_spin = record if want_spin is None else want_spin
    if isinstance(rule, FrameEqualTime) and rule.beta != 0.0:
        wf = boost_wavefunction(wf, Boost(rule.beta))
        t0, z0 = boost_coords(t0, z0, rule.beta)
    H = rule.step
    if max_steps is None:
        span = float(np.max(horizon - np.min(_build_time(wf, t0, z0))))
        max_steps = int(200 * max(span, 1.0) / H) + 1000

    t, z = t0, z0
    status = ["ok"] * N
    steps = np.zeros(N, dtype=int)
    movable = _build_time(wf, t, z) < horizon
    alive = movable.any(axis=1)
    rec = _Recorder(record, n)

    s = sample_guidance(wf, t, z, want_spin=True if record else want_spin)
    dead_start = s.node & alive
    for i in np.flatnonzero(dead_start):
        status[i] = "node_abort"
    alive &= ~dead_start
    rec.add(np.arange(N), t, z, _spin_or_nan(s, N, n), 0.0)

    level = np.zeros(N, dtype=int)
    pos = np.zeros(N, dtype=np.int64)  # rule parameter in units of H / 2**MAX_DEPTH
    attempts = np.zeros(N, dtype=int)
    unit = 1 << MAX_DEPTH
    spin_rows = want_spin or record
    while alive.any():
        idx = np.flatnonzero(alive)
        lv = level[idx]
        h = H / 2.0**lv
        st = _advance(wf, rule, t[idx], z[idx], _rows_subset(s, idx), movable[idx], h, spin_rows)
        attempts[idx] += 1
        broken = st.bad | st.superluminal
        refine = (broken | (st.err > tol)) & (lv < MAX_DEPTH)
        abort = broken & ~refine
        accept = ~refine & ~abort
        level[idx[refine]] += 1
        for j in np.flatnonzero(abort):
            i = idx[j]
            status[i] = "superluminal" if st.superluminal[j] else "node_abort"
            alive[i] = False
            log.warning("trajectory %d stopped: %s", i, status[i])
        gi = idx[accept]
        t[gi], z[gi] = st.t[accept], st.z[accept]
        _scatter_sample(s, gi, st.sample, accept)
        rec.add(gi, st.t[accept], st.z[accept], _spin_or_nan(st.sample, N, n)[accept], h[accept])
        steps[gi] += 1
        pos[gi] += unit >> level[gi]
        lg = level[gi]
        grow = (st.err[accept] < tol / 8) & (lg > 0)
        grow &= pos[gi] % np.where(lg > 0, unit >> np.maximum(lg - 1, 0), 1) == 0
        level[gi[grow]] -= 1
        movable = _build_time(wf, t, z) < horizon
        alive &= movable.any(axis=1)
        over = alive & (attempts >= max_steps)
        for i in np.flatnonzero(over):
            status[i] = "step_ceiling"
        alive &= ~over

    tables = None
    if record:
        start_pts = [ConfigPoint.from_arrays(a, b) for a, b in zip(t0, z0)]
        tables = []
        for i, (tt, zz, sp, hh) in enumerate(rec.tables(N)):
            meta = {
                "rule": rule.describe(),
                "start": [[e.t, e.z] for e in start_pts[i].events],
                "experiment": experiment or wf.label,
                "steps": int(steps[i]),
                "status": status[i],
                "frame": wf.frame,
                "horizon": horizon.tolist(),
                "boosts": [],
                "spin_transport": "carried unchanged under boosts (no Wigner rotation)",
            }
            tables.append(TrajectoryTable(tt, zz, sp, hh, meta))
    return BatchResult(t, z, status, steps, wf.frame, tables)


def _spin_or_nan(s, N, n):
    if s.spin is not None:
        return s.spin
    return np.full((s.v.shape[0], n, 3), np.nan)


def _scatter_sample(s, rows, new, mask):
    s.v[rows] = new.v[mask]
    s.rho[rows] = new.rho[mask]
    s.node[rows] = new.node[mask]
    s.field[rows] = new.field[mask]
    if s.spin is not None and new.spin is not None:
        s.spin[rows] = new.spin[mask]


def integrate(
    wf: MultiTimeWaveFunction,
    start: ConfigPoint,
    rule: CoordinationRule,
    horizon,
    *,
    max_steps: int | None = None,
    experiment: str = "",
) -> TrajectoryTable:
    """Integrate one trajectory and return its look-up table.

    A node abort returns the prefix with ``meta['status'] == 'node_abort'``;
    superluminal guidance and the step ceiling raise :class:`IntegrationError`.
    """
    res = integrate_many(
        wf, start.t[None], start.z[None], rule, horizon, max_steps=max_steps, experiment=experiment
    )
    if res.status[0] in ("superluminal", "step_ceiling"):
        raise IntegrationError(f"integration failed: {res.status[0]}")
    return res.tables[0]


# ---------------------------------------------------------------------------
# frames and checks


def boost_table(tab: TrajectoryTable, b: Boost) -> TrajectoryTable:
    if b.beta == 0.0:
        return tab
    t, z = boost_coords(tab.t, tab.z, b.beta)
    meta = dict(tab.meta)
    meta["boosts"] = list(meta.get("boosts", [])) + [b.beta]
    meta["frame"] = compose_velocities(tab.frame, b.beta)
    return TrajectoryTable(t, z, tab.spin.copy(), tab.h.copy(), meta)


@dataclass
class CoordinationReport:
    rule: str
    max_violation: float
    worst_row: int | None
    worst_particle: int | None
    violations: list[tuple[int, int, float]]

    @property
    def ok(self) -> bool:
        return not self.violations


def coordination_check(tab: TrajectoryTable, tol: float = 1e-10) -> CoordinationReport:
    """Check every row step against the table's coordination rule.

    Proper-time rows need dt**2 - dz**2 == h**2 (relative to h**2).  Equal-time
    rows need every moving particle to advance the same dt in the frame the
    table is currently expressed in.  Frozen particles (zero step) are exempt.
    """
    rule = tab.meta.get("rule", {}).get("kind", "proper_time")
    dt = np.diff(tab.t, axis=0)
    dz = np.diff(tab.z, axis=0)
    h = tab.h[1:]
    moving = (dt != 0) | (dz != 0)
    if rule == "proper_time":
        err = np.abs(dt**2 - dz**2 - h[:, None] ** 2) / h[:, None] ** 2
    else:
        err = np.abs(dt - h[:, None]) / h[:, None]
    err = np.where(moving, err, 0.0)
    bad = np.argwhere(err > tol)
    violations = [(int(r) + 1, int(k), float(err[r, k])) for r, k in bad]
    if err.size:
        r, k = np.unravel_index(int(np.argmax(err)), err.shape)
        worst = float(err[r, k])
    else:
        r = k = None
        worst = 0.0
    return CoordinationReport(
        rule,
        worst,
        None if r is None else int(r) + 1,
        None if k is None else int(k),
        violations,
    )


# ---------------------------------------------------------------------------
# export

CSV_HEADER = ["step", "t1", "z1", "sx1", "sy1", "sz1", "t2", "z2", "sx2", "sy2", "sz2"]


def write_table_csv(tab: TrajectoryTable, path, digits: int = 12):
    """Write the table as CSV and its metadata as a JSON sidecar ``<path>.json``."""
    if tab.n_particles != 2:
        raise ValueError("the CSV layout is defined for two-particle tables")
    path = Path(path)
    fmt = f"{{:.{digits}g}}"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in range(tab.n_rows):
            row = [str(r)]
            for k in range(2):
                row += [fmt.format(tab.t[r, k]), fmt.format(tab.z[r, k])]
                row += [fmt.format(x) for x in tab.spin[r, k]]
            w.writerow(row)
    side = path.with_suffix(path.suffix + ".json")
    meta = dict(tab.meta, row_h=[float(x) for x in tab.h])
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_table_csv(path) -> TrajectoryTable:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, [1, 6]]
    z = data[:, [2, 7]]
    spin = np.stack([data[:, 3:6], data[:, 8:11]], axis=1)
    side = path.with_suffix(path.suffix + ".json")
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    if "row_h" in meta:
        h = np.asarray(meta.pop("row_h"), dtype=float)
    else:
        step = meta.get("rule", {}).get("dtau", meta.get("rule", {}).get("dt", math.nan))
        h = np.full(len(t), step)
        h[0] = 0.0
    return TrajectoryTable(t, z, spin, h, meta)
