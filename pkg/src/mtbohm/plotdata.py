"""Plot data: configuration-space density grids, trajectory and path polylines.

Everything here returns plain arrays and writes CSV; rendering lives in
:mod:`mtbohm.plotting` and is optional.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .ensemble import CoordinationSurface, _proposal_terms, sample_initial_arrays
from .experiments import Experiment
from .guidance import CoordinationRule, integrate_many
from .spacetime import gamma
from .wavefunction import MultiTimeWaveFunction, density_many

GRID_HALFWIDTH = 7.0  # grid margin around packet centres, in packet widths
MAX_GRID_POINTS = 4_000_000


@dataclass
class DensityGrid:
    """|Psi|^2 on a rectangular grid of (z1, z2) at the surface times."""

    times: tuple[float, float]
    z1: np.ndarray
    z2: np.ndarray
    rho: np.ndarray  # shape (len(z1), len(z2))

    @property
    def integral(self) -> float:
        """Trapezoidal integral over the grid (1 for a normalised state)."""
        return float(trapezoid(trapezoid(self.rho, self.z2, axis=1), self.z1))


def _overlapping_carriers(wf: MultiTimeWaveFunction, k: int, t: float) -> bool:
    """True if two valid segments of particle k with different momenta overlap at t.

    Segments of different branches count too: their cross terms in |Psi|^2
    oscillate just like interference fringes within one branch.
    """
    live = {
        (s.center(t), s.v, s.sigma)
        for br in wf.branches
        for s in br.packets[k].segments
        if s.valid(t, s.center(t))
    }
    live = sorted(live)
    for i, (ca, va, sa) in enumerate(live):
        for cb, vb, sb in live[i + 1 :]:
            if va != vb and abs(ca - cb) < 8 * max(sa, sb):
                return True
    return False


def grid_spacing(wf: MultiTimeWaveFunction, k: int, t: float) -> float:
    """Spacing resolving the envelope, and interference fringes where present."""
    segs = [s for br in wf.branches for s in br.packets[k].segments]
    dz = min(s.sigma for s in segs) / 10
    if _overlapping_carriers(wf, k, t):
        p = max(wf.masses[k] * gamma(s.v) * abs(s.v) for s in segs)
        if p > 0:
            dz = min(dz, math.pi / (6 * p))
    return dz


def density_grid(
    wf: MultiTimeWaveFunction, surf: CoordinationSurface, resolution: float | None = None
) -> DensityGrid:
    """Tabulate |Psi|^2 over the region where the surface carries probability."""
    _, centers, sigmas = _proposal_terms(wf, surf.times)
    axes = []
    for k, t in enumerate(surf.times):
        lo = float(np.min(centers[:, k] - GRID_HALFWIDTH * sigmas[:, k]))
        hi = float(np.max(centers[:, k] + GRID_HALFWIDTH * sigmas[:, k]))
        dz = resolution or grid_spacing(wf, k, t)
        axes.append(np.linspace(lo, hi, int(math.ceil((hi - lo) / dz)) + 1))
    z1, z2 = axes
    if z1.size * z2.size > MAX_GRID_POINTS:
        raise ValueError(f"grid of {z1.size} x {z2.size} points is too large; raise the resolution")
    Z1, Z2 = np.meshgrid(z1, z2, indexing="ij")
    z = np.stack([Z1.ravel(), Z2.ravel()], axis=1)
    t = np.broadcast_to(np.asarray(surf.times, dtype=float), z.shape)
    rho = density_many(wf, t, z).reshape(Z1.shape)
    return DensityGrid(tuple(surf.times), z1, z2, rho)


def indicative_trajectories(exp: Experiment, surf: CoordinationSurface, rule: CoordinationRule, n: int, seed: int):
    """Look-up tables of ``n`` trajectories started from |Psi|^2 samples."""
    if n == 0:
        return []
    t0, z0 = sample_initial_arrays(exp.wf, surf, n, seed)
    res = integrate_many(exp.wf, t0, z0, rule, exp.horizon, record=True, experiment=exp.kind)
    return res.tables


def path_segments(wf: MultiTimeWaveFunction, horizon) -> list[dict]:
    """Space-time centre lines of every packet segment (figure-style path plot)."""
    rows, seen = [], set()
    for b, br in enumerate(wf.branches):
        for k, hist in enumerate(br.packets):
            for s in hist.segments:
                t_end = min(s.t_end, horizon[k])
                key = (k, s.birth, s.v, t_end, s.label)
                if key in seen:
                    continue
                seen.add(key)
                rows.append(
                    {
                        "particle": k + 1,
                        "branch": b,
                        "label": s.label,
                        "t_start": s.birth.t,
                        "z_start": s.birth.z,
                        "t_end": t_end,
                        "z_end": float(s.center(t_end)),
                        "amp": s.amp,
                    }
                )
    return rows


# ---------------------------------------------------------------------------
# CSV writers


def _fmt(x) -> str:
    return f"{x:.12g}" if isinstance(x, float) else str(x)


def write_density_csv(grid: DensityGrid, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z1", "z2", "rho"])
        for i, a in enumerate(grid.z1):
            for j, b in enumerate(grid.z2):
                w.writerow([f"{a:.12g}", f"{b:.12g}", f"{grid.rho[i, j]:.12g}"])


def write_trajectories_csv(tables, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "row", "t1", "z1", "t2", "z2"])
        for i, tab in enumerate(tables):
            for r in range(tab.n_rows):
                w.writerow([i, r, *(f"{x:.12g}" for x in (tab.t[r, 0], tab.z[r, 0], tab.t[r, 1], tab.z[r, 1]))])


def write_paths_csv(rows: list[dict], path: Path):
    fields = ["particle", "branch", "label", "t_start", "z_start", "t_end", "z_end", "amp"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])


def read_density_csv(path) -> DensityGrid:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    z1 = np.unique(data[:, 0])
    z2 = np.unique(data[:, 1])
    rho = data[:, 2].reshape(z1.size, z2.size)
    return DensityGrid((math.nan, math.nan), z1, z2, rho)
