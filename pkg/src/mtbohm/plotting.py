"""Optional figure rendering from plot data (requires the ``plot`` extra).

matplotlib is imported lazily so the rest of the package never depends on it.
"""
from __future__ import annotations

from pathlib import Path

from .plotdata import DensityGrid


class RenderUnavailable(RuntimeError):
    """matplotlib is not installed."""


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RenderUnavailable("rendering needs matplotlib: pip install 'mtbohm[plot]'") from exc
    return plt


def render_configuration(grid: DensityGrid, tables, path: Path, title: str = ""):
    """Density in the reduced configuration space (z1, z2) with trajectories."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 5))
    ax.pcolormesh(grid.z1, grid.z2, grid.rho.T, shading="auto", cmap="Greys")
    for tab in tables:
        ax.plot(tab.z[:, 0], tab.z[:, 1], lw=0.7)
    ax.set_xlabel("z1")
    ax.set_ylabel("z2")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_paths(rows: list[dict], path: Path, title: str = ""):
    """Space-time diagram of the packet centre lines, one panel per particle."""
    plt = _pyplot()
    particles = sorted({row["particle"] for row in rows})
    fig, axes = plt.subplots(1, len(particles), figsize=(5 * len(particles), 5), sharey=True, squeeze=False)
    for ax, k in zip(axes[0], particles):
        for row in rows:
            if row["particle"] == k:
                ax.plot([row["z_start"], row["z_end"]], [row["t_start"], row["t_end"]], color="k", lw=1.0)
        ax.set_xlabel(f"z{k}")
        ax.set_title(f"particle {k}")
    axes[0][0].set_ylabel("t")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
