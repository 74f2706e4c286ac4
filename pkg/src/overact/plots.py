"""Figures from a run directory.

One image per figure analog plus the raw CSVs already written by the
harness:

* ``reference_origins.png``: where each planned reference trajectory starts,
  drawn in the odometry frame together with the path as seen from that
  frame before and after global fixes;
* ``solve_times.png``: planner and MPC solve times per cycle;
* ``tracking_error.png``: longitudinal and lateral tracking error with a
  +-20 mm band;
* ``freespace.png``: snapshots of the admissible region around obstacles.
"""
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .freespace import ConvexPolytope  # noqa: E402
from .harness import load_logs  # noqa: E402
from .localization import se2_apply  # noqa: E402

log = logging.getLogger(__name__)

ERROR_BAND = 0.020


def _path_in_odom(path, ctrl_row_pose):
    return se2_apply(ctrl_row_pose, path)


def plot_reference_origins(runlog, out):
    path = runlog.meta.get("path", np.zeros((0, 2)))
    fig, ax = plt.subplots(figsize=(7, 6))
    rx, ry = runlog.column("controller", "ref_x"), runlog.column("controller", "ref_y")
    ax.plot(rx, ry, color="tab:green", lw=1.0, label="reference trajectory (odom)")
    ax.plot(runlog.column("planner", "x0"), runlog.column("planner", "y0"), "o", ms=3, color="tab:red",
            label="plan initial positions")
    if path.shape[0]:
        poses = np.column_stack([runlog.column("controller", c) for c in ("odom_x", "odom_y", "odom_psi")])
        if poses.shape[0]:
            for pose, style, lab in ((poses[0], "-", "path in odom, start"), (poses[-1], "--", "path in odom, end")):
                p = _path_in_odom(path, pose)
                ax.plot(p[:, 0], p[:, 1], style, color="tab:blue", lw=0.8, label=lab)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x odom [m]")
    ax.set_ylabel("y odom [m]")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_solve_times(runlog, out):
    fig, axes = plt.subplots(2, 1, figsize=(8, 6))
    budget = runlog.meta.get("budget")
    for ax, table, name in ((axes[0], "planner", "planner"), (axes[1], "controller", "MPC")):
        t = runlog.column(table, "t")
        st = runlog.column(table, "solve_time") * 1e3
        ax.plot(t, st, ".", ms=2)
        if st.size:
            ax.axhline(st.mean(), color="k", lw=0.8, label=f"mean {st.mean():.2f} ms")
        if name == "MPC" and budget:
            ax.axhline(budget * 1e3, color="tab:red", lw=0.8, ls="--", label="budget")
        ax.set_ylabel(f"{name} solve time [ms]")
        ax.legend(loc="upper right", fontsize=8)
    axes[1].set_xlabel("t [s]")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_tracking_error(runlog, out):
    t = runlog.column("controller", "t")
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(t, runlog.column("controller", "x_e") * 1e3, lw=0.8, label="longitudinal")
    ax.plot(t, runlog.column("controller", "y_e") * 1e3, lw=0.8, label="lateral")
    for sgn in (-1, 1):
        ax.axhline(sgn * ERROR_BAND * 1e3, color="tab:red", lw=0.8, ls="--")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("tracking error [mm]")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_freespace(runlog, out, snapshots=4):
    polys = [p for p in runlog.polytopes if p.get("planes")]
    if not polys:
        return False
    obstacles = runlog.meta.get("obstacles", np.zeros((0, 2)))
    path = runlog.meta.get("path", np.zeros((0, 2)))
    # centre the snapshots on the cycle whose plan passes closest to an obstacle
    if obstacles.shape[0]:
        gaps = []
        for p in polys:
            nodes = se2_apply(np.asarray(p["odom_to_global"], float), np.asarray(p["nodes"], float))
            d = np.hypot(nodes[:, None, 0] - obstacles[None, :, 0], nodes[:, None, 1] - obstacles[None, :, 1])
            gaps.append(d.min())
        centre = int(np.argmin(gaps))
    else:
        centre = len(polys) // 2
    idx = np.clip(centre + 2 * (np.arange(snapshots) - snapshots // 2), 0, len(polys) - 1)
    pick = [polys[i] for i in np.unique(idx)]
    fig, axes = plt.subplots(1, len(pick), figsize=(4 * len(pick), 4), squeeze=False)
    for ax, snap in zip(axes[0], pick):
        og = np.asarray(snap["odom_to_global"], float)
        planes = np.asarray(snap["planes"], float).reshape(-1, 3)
        poly = ConvexPolytope(planes[:, :2], planes[:, 2]).transformed(og)
        nodes = se2_apply(og, np.asarray(snap["nodes"], float))
        verts = poly.vertices()
        if verts.shape[0] >= 3:
            ax.fill(verts[:, 0], verts[:, 1], color="tab:green", alpha=0.3, label="admissible region")
        if obstacles.shape[0]:
            ax.plot(obstacles[:, 0], obstacles[:, 1], ".", ms=2, color="tab:red", label="obstacles")
        if path.shape[0]:
            ax.plot(path[:, 0], path[:, 1], color="tab:blue", lw=0.8, label="path")
        ax.plot(nodes[:, 0], nodes[:, 1], "-o", ms=2, color="darkgreen", lw=1.0, label="plan")
        ax.plot(nodes[0, 0], nodes[0, 1], "s", color="k", ms=4)
        c = nodes.mean(axis=0)
        ax.set_xlim(c[0] - 4, c[0] + 4)
        ax.set_ylim(c[1] - 4, c[1] + 4)
        ax.set_aspect("equal")
        ax.set_title(f"t = {snap['t']:.1f} s", fontsize=9)
    axes[0][0].legend(loc="lower left", fontsize=7)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return True


def export_plots(run_dir, out_dir=None):
    """Write the figure images for a run directory; returns the list of files written."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    runlog = load_logs(run_dir)
    if runlog.controller.shape[0] == 0:
        log.warning("run in %s has no records; no figures written", run_dir)
        return []
    written = []
    for name, fn in (("reference_origins.png", plot_reference_origins), ("solve_times.png", plot_solve_times),
                     ("tracking_error.png", plot_tracking_error), ("freespace.png", plot_freespace)):
        if fn(runlog, out_dir / name) is not False:
            written.append(out_dir / name)
    return written
