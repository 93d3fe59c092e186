"""Four-panel summary figure from the controller's CSV logs.

Panels: (a) feasibility regions of the three controller variants,
(b) phase-plane closed-loop trajectory, (c) stacked memory weights over
time with dashed markers at every memory event, (d) tube cross sections
at selected snapshot steps. Output is a vector image; rendering is
deterministic (fixed hash salt, no embedded timestamps), so re-running on
identical inputs reproduces the file byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .csvio import SchemaError, load_roa, load_trajectory, load_tubes

VARIANT_ORDER = ["full_sltmpc", "primary_async", "fixed_tube_baseline"]
VARIANT_LABELS = {
    "full_sltmpc": "full tube optimization",
    "primary_async": "fused tubes (async)",
    "fixed_tube_baseline": "fixed tubes",
}
VARIANT_COLORS = {
    "full_sltmpc": "#c6dbef",
    "primary_async": "#6baed6",
    "fixed_tube_baseline": "#2171b5",
}


@dataclass
class FigureSpec:
    traj_path: Path
    roa_path: Path
    tubes_path: Path
    out_path: Path
    tube_steps: tuple[int, ...] = (1, 5, 10, 15)
    panels: tuple[str, ...] = ("regions", "trajectory", "weights", "tubes")


def _grid_spacing(points: np.ndarray) -> float:
    vals = np.unique(np.round(points[:, 0], 12))
    if vals.size < 2:
        return 0.05
    return float(np.min(np.diff(vals)))


def _panel_regions(ax, roa):
    spacing = _grid_spacing(roa.points)
    size = spacing * 72 * 0.9  # point size roughly matching the cell pitch
    for variant in VARIANT_ORDER:
        pts = roa.feasible_points(variant)
        if pts.size:
            ax.scatter(pts[:, 0], pts[:, 1], marker="s", s=size ** 2,
                       color=VARIANT_COLORS[variant], linewidths=0,
                       label=VARIANT_LABELS[variant])
    ax.set_title("feasible initial states")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.legend(loc="upper right", fontsize=7)


def _panel_trajectory(ax, traj, roa):
    pts = roa.points
    ax.add_patch(plt.Rectangle((pts[:, 0].min(), pts[:, 1].min()),
                               np.ptp(pts[:, 0]), np.ptp(pts[:, 1]),
                               fill=False, linestyle=":", color="gray"))
    ax.plot(traj.x[:, 0], traj.x[:, 1], "-o", ms=2.5, lw=1.0, color="#d95f02")
    ax.plot(traj.x[0, 0], traj.x[0, 1], "s", ms=6, color="#d95f02")
    ax.annotate("start", traj.x[0], textcoords="offset points", xytext=(4, 4),
                fontsize=7)
    ax.set_title("closed-loop trajectory")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")


def _panel_weights(ax, traj) -> list[int]:
    M = traj.lam.shape[1]
    ax.stackplot(traj.k, traj.lam.T,
                 labels=[f"weight {j}" for j in range(M)], alpha=0.85)
    markers = traj.event_steps
    for k in markers:
        ax.axvline(k, linestyle="--", color="black", lw=0.8)
    ax.set_xlim(traj.k[0], traj.k[-1])
    ax.set_ylim(0.0, 1.05)
    ax.set_title("memory weights and update events")
    ax.set_xlabel("step")
    ax.set_ylabel("weight")
    ax.legend(loc="upper right", fontsize=7)
    return markers


def _panel_tubes(ax, tubes, steps):
    cmap = plt.get_cmap("viridis")
    drew = False
    available = sorted(tubes)
    chosen = [s for s in steps if s in tubes] or available[: len(steps)]
    for idx, entry in enumerate(chosen):
        color = cmap(idx / max(len(chosen) - 1, 1))
        polys = tubes[entry]
        for step, verts in sorted(polys.items()):
            if verts.shape[0] < 3:
                continue
            closed = np.vstack([verts, verts[:1]])
            ax.plot(closed[:, 0], closed[:, 1], color=color, lw=0.8,
                    alpha=0.35 + 0.6 * (step / max(len(polys), 1)),
                    label=f"t={entry}" if step == max(polys) else None)
            drew = True
    if not drew:
        ax.text(0.5, 0.5, "no tube polygons", transform=ax.transAxes,
                ha="center", fontsize=8)
    ax.set_title("tube cross sections")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.legend(loc="upper right", fontsize=7)


def render(spec: FigureSpec) -> dict:
    """Render the figure; returns a summary with the drawn marker steps.

    All inputs are loaded and validated before any drawing starts, so a
    schema error never leaves a partial output file behind.
    """
    traj = load_trajectory(spec.traj_path)
    roa = load_roa(spec.roa_path)
    tubes = load_tubes(spec.tubes_path)

    plt.rcParams["svg.hashsalt"] = "tubefig"
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    _panel_regions(axes[0, 0], roa)
    _panel_trajectory(axes[0, 1], traj, roa)
    markers = _panel_weights(axes[1, 0], traj)
    _panel_tubes(axes[1, 1], tubes, spec.tube_steps)
    fig.tight_layout()
    fig.savefig(spec.out_path, metadata={"Date": None})
    plt.close(fig)
    return {"out": str(spec.out_path), "panels": 4, "marker_steps": markers}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="render",
                                description="Render the four-panel summary figure")
    p.add_argument("--traj", required=True, help="trajectory.csv path")
    p.add_argument("--roa", required=True, help="roa.csv path")
    p.add_argument("--tubes", required=True, help="tubes.csv path")
    p.add_argument("--out", required=True, help="output image path (vector format)")
    p.add_argument("--tube-steps", default="1 5 10 15",
                   help="snapshot steps for the tube panel")
    args = p.parse_args(argv)
    try:
        steps = tuple(int(t) for t in args.tube_steps.split())
    except ValueError:
        print("render error: --tube-steps takes integers", file=sys.stderr)
        return 2
    spec = FigureSpec(traj_path=Path(args.traj), roa_path=Path(args.roa),
                      tubes_path=Path(args.tubes), out_path=Path(args.out),
                      tube_steps=steps)
    try:
        info = render(spec)
    except (SchemaError, OSError) as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return 1
    print(f"render: wrote {info['out']} with {info['panels']} panels, "
          f"{len(info['marker_steps'])} event markers")
    return 0


if __name__ == "__main__":
    sys.exit(main())
