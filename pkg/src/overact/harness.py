"""Closed-loop orchestration in virtual time, logging and run metrics.

Every tick of the 1 kHz simulation clock runs, in this order: planner (when
due), MPC (when due), velocity loop, watchdog, plant step, sensors,
localization, log.  Solve times are virtual unless real-time measurement is
requested, so two runs with the same seed write identical files.
"""
import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .control import TrackingController
from .dynamics import ActuatorCommand, TIRES
from .localization import Localizer, se2_apply, se2_compose, se2_inverse
from .planner import Planner
from .simulation import Simulator, Watchdog

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SAFE_STOP = 2
EXIT_INVALID = 3

SIM_COLUMNS = (["t", "x", "y", "psi", "vx", "vy", "yaw_rate", "est_x", "est_y", "est_psi", "est_vx", "est_vy",
                "est_yaw_rate"] + [f"delta_{n}" for n in TIRES] + [f"omega_{n}" for n in TIRES]
               + [f"cmd_delta_{n}" for n in TIRES] + [f"cmd_omega_{n}" for n in TIRES]
               + ["clearance", "safe_stop"])
CONTROLLER_COLUMNS = ["t", "x_e", "y_e", "psi_e", "v_ox", "v_oy", "v_opsi", "a_ox", "a_oy", "a_opsi", "status",
                      "iterations", "solve_time", "fallback", "kkt", "violation", "ref_x", "ref_y", "ref_psi",
                      "ref_vx", "ref_yaw_rate", "true_err_x", "true_err_y", "path_dev", "odom_x", "odom_y",
                      "odom_psi", "saturated"]
PLANNER_COLUMNS = ["t", "branch", "status", "cost", "iterations", "solve_time", "n_planes", "violation_nodes",
                   "violation_fine", "x0", "y0", "psi0", "v0", "yaw_rate0", "plan_path_dev"]
LOCALIZATION_COLUMNS = ["t", "t_meas", "fix_x", "fix_y", "fix_psi", "jump_x", "jump_y", "jump_psi", "accepted"]

STATUS_CODES = {"optimal": 0, "max_iter": 1, "infeasible": 2, "infeasible_freespace": 3, "stop": 4}
BRANCH_CODES = {"bootstrap": 0, "open_loop": 1, "reinit": 2}
FMT = "%.9g"


@dataclass
class RunLog:
    """Per-module records as float arrays (one row per record) plus the summary."""

    sim: np.ndarray
    controller: np.ndarray
    planner: np.ndarray
    localization: np.ndarray
    polytopes: list = field(default_factory=list)
    events: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK
    meta: dict = field(default_factory=dict)

    def column(self, table, name):
        cols = {"sim": SIM_COLUMNS, "controller": CONTROLLER_COLUMNS, "planner": PLANNER_COLUMNS,
                "localization": LOCALIZATION_COLUMNS}[table]
        return getattr(self, table)[:, cols.index(name)]


def _pct(x):
    x = np.asarray(x, float)
    if x.size == 0:
        return {"mean": None, "p50": None, "p90": None, "p99": None, "max": None}
    return {"mean": float(np.mean(x)), "p50": float(np.percentile(x, 50)), "p90": float(np.percentile(x, 90)),
            "p99": float(np.percentile(x, 99)), "max": float(np.max(x))}


def _max(x, default=0.0):
    x = np.asarray(x, float)
    return float(np.max(x)) if x.size else default


def summarize(sim, ctrl, plan, loc, events=(), budget=None, stop_speed=0.01):
    """Run metrics from the record tables (the same tables written to CSV)."""
    sim = np.asarray(sim, float).reshape(-1, len(SIM_COLUMNS))
    ctrl = np.asarray(ctrl, float).reshape(-1, len(CONTROLLER_COLUMNS))
    plan = np.asarray(plan, float).reshape(-1, len(PLANNER_COLUMNS))
    loc = np.asarray(loc, float).reshape(-1, len(LOCALIZATION_COLUMNS))
    C = {n: ctrl[:, i] for i, n in enumerate(CONTROLLER_COLUMNS)}
    P = {n: plan[:, i] for i, n in enumerate(PLANNER_COLUMNS)}
    S = {n: sim[:, i] for i, n in enumerate(SIM_COLUMNS)}
    err_inf = np.maximum(np.abs(C["x_e"]), np.abs(C["y_e"]))
    err_2 = np.hypot(C["x_e"], C["y_e"])
    true_err = np.hypot(C["true_err_x"], C["true_err_y"])
    misses = int(np.sum(C["fallback"] > 0))
    ref = np.column_stack([C["ref_x"], C["ref_y"]])
    ref_jump = np.hypot(*np.diff(ref, axis=0).T) if len(ref) > 1 else np.zeros(0)
    odom = np.column_stack([C["odom_x"], C["odom_y"]])
    odom_jump = np.hypot(*np.diff(odom, axis=0).T) if len(odom) > 1 else np.zeros(0)
    speed = np.hypot(S["vx"], S["vy"])
    stop = np.nonzero(S["safe_stop"] > 0)[0]
    out = {
        "duration": float(S["t"][-1]) if len(S["t"]) else 0.0,
        "sim_steps": int(len(S["t"])),
        "controller_cycles": int(len(C["t"])),
        "planner_cycles": int(len(P["t"])),
        "max_tracking_error": _max(err_inf),
        "max_tracking_error_euclidean": _max(err_2),
        "mean_tracking_error": float(np.mean(err_2)) if err_2.size else 0.0,
        "max_heading_error": _max(np.abs(C["psi_e"])),
        "max_true_tracking_error": _max(true_err),
        "mpc_solve_time": _pct(C["solve_time"]),
        "planner_solve_time": _pct(P["solve_time"]),
        "mpc_fallbacks": misses,
        "mpc_miss_fraction": misses / len(C["t"]) if len(C["t"]) else 0.0,
        "mpc_nonoptimal": int(np.sum(C["status"] != 0)),
        "mpc_constraint_violation": _max(C["violation"]),
        "planner_nonoptimal": int(np.sum(P["status"] != 0)),
        "planner_reinit": int(np.sum(P["branch"] == BRANCH_CODES["reinit"])),
        "polytope_violations": int(np.sum(P["violation_nodes"] > 1e-6)),
        "max_polytope_violation": _max(P["violation_nodes"]),
        "max_polytope_violation_fine": _max(P["violation_fine"]),
        "min_clearance": float(np.min(S["clearance"])) if len(S["t"]) else None,
        "max_path_deviation": _max(C["path_dev"]),
        "max_plan_path_deviation": _max(P["plan_path_dev"]),
        "max_reference_jump": _max(ref_jump),
        "max_odom_frame_jump": _max(odom_jump),
        "global_fixes": int(len(loc)),
        "fixes_rejected": int(np.sum(loc[:, -1] == 0)) if len(loc) else 0,
        "saturated_cycles": int(np.sum(C["saturated"] > 0)),
        "safe_stop": bool(stop.size),
        "safe_stop_time": float(S["t"][stop[0]]) if stop.size else None,
        "final_speed": float(speed[-1]) if speed.size else 0.0,
        "stopped_after_safe_stop": bool(stop.size and speed[-1] < stop_speed),
        "events": [list(e) for e in events],
    }
    if budget is not None:
        out["mpc_budget"] = budget
    return out


def _odom_to_frame(pose_o, og):
    return se2_compose(og, pose_o)


class _PathTracker:
    """Local nearest-point search on the path, keeping a running arc-length estimate."""

    def __init__(self, path):
        self.path = path
        self.s = 0.0

    def deviation(self, p):
        s, d = self.path.closest(p, self.s - 2.0, self.s + 4.0)
        self.s = s
        return d


def run(scenario, out_dir=None, seed=None, duration=None, realtime_measure=False):
    """Simulate the scenario in closed loop; write logs to ``out_dir`` when given."""
    sc = scenario
    seed = sc.seed if seed is None else int(seed)
    duration = sc.duration if duration is None else float(duration)
    if duration < 0:
        raise ValueError("duration must be non-negative")
    simcfg = copy.deepcopy(sc.sim)
    dt = simcfg.dt
    ccfg = copy.deepcopy(sc.controller)
    if "mpc_budget" in sc.faults:
        ccfg.budget = float(sc.faults["mpc_budget"])
    pcfg = copy.deepcopy(sc.planner)
    r_veh = sc.params.enclosing_radius

    sim = Simulator(sc.params, sc.geom, simcfg, seed=seed, pose=sc.start, obstacles=sc.obstacles)
    loc = Localizer(sc.geom, sc.params, simcfg.sensors, initial_global=sc.start, noise=sc.ekf)
    planner = Planner(sc.path, pcfg, sc.boundaries, r_veh)
    ctrl = TrackingController(sc.geom, sc.params, ccfg, actuators=simcfg.actuators, dt=dt, delta0=sim.delta,
                              omega0=sim.omega)
    ctrl.mpc.realtime = bool(realtime_measure)
    if "mpc_jitter" in sc.faults and not realtime_measure:
        # exponential extra solve time from its own stream, independent of the sensor noise
        jitter_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        jitter_mean = float(sc.faults["mpc_jitter"])
        ctrl.mpc.jitter = lambda: float(jitter_rng.exponential(jitter_mean))
    watchdog = Watchdog(simcfg.watchdog_timeout)
    plan_time_fn = None if realtime_measure else pcfg.virtual_time

    n_steps = int(round(duration / dt))
    k_ctrl = int(round(1.0 / (ccfg.rate * dt)))
    k_plan = int(round(1.0 / (pcfg.rate * dt)))
    dropout = sc.faults.get("command_dropout")
    tracker_true = _PathTracker(sc.path)
    obstacles = sc.obstacles
    bnd = sc.boundaries
    obstacle_tree = cKDTree(obstacles) if obstacles.shape[0] else None
    seg_a = np.array([b[:2] for b in bnd], float).reshape(-1, 2)
    seg_d = np.array([b[2:] for b in bnd], float).reshape(-1, 2) - seg_a
    seg_dd = np.maximum(np.einsum("ij,ij->i", seg_d, seg_d), 1e-300)

    sim_rows = np.zeros((n_steps, len(SIM_COLUMNS)))
    ctrl_rows = []
    plan_rows = []
    loc_rows = []
    polys = []
    events = []

    plan = None
    cmd = ActuatorCommand(sim.delta.copy(), sim.omega.copy())
    last_cmd_time = 0.0
    stopped_modules = False
    n_fix_seen = 0

    def clearance(p):
        c = math.inf
        if obstacle_tree is not None:
            c = float(obstacle_tree.query(p)[0])
        if seg_a.shape[0]:
            tt = np.clip(np.einsum("ij,ij->i", p - seg_a, seg_d) / seg_dd, 0.0, 1.0)
            gap = seg_a + tt[:, None] * seg_d - p
            c = min(c, float(np.sqrt(np.min(np.einsum("ij,ij->i", gap, gap)))))
        return c - r_veh

    for k in range(n_steps):
        t = k * dt
        est = loc.filter.estimate
        og = loc.tree.odom_to_global.copy()
        try:
            if not stopped_modules and k % k_plan == 0:
                measured = np.array([est.pose[0], est.pose[1], est.pose[2], est.velocity[0], est.velocity[2]])
                cloud = se2_apply(est.pose, sim.scan())
                inv = se2_inverse(og)
                bnd_odom = [np.concatenate([se2_apply(inv, b[:2][None])[0], se2_apply(inv, b[2:][None])[0]])
                            for b in bnd]
                plan, prec = planner.plan(t, measured, og, cloud, bnd_odom, solve_time_fn=plan_time_fn)
                nodes_g = se2_apply(og, plan.nodes[:, :2])
                dev = float(np.max(sc.path.distance_to(nodes_g))) if prec.status == "optimal" else 0.0
                plan_rows.append([t, BRANCH_CODES[prec.branch], STATUS_CODES.get(prec.status, 9), prec.cost,
                                  prec.iterations, prec.solve_time, prec.n_planes, prec.violation_nodes,
                                  prec.violation_fine, *prec.x_init, dev])
                polys.append({"t": t, "odom_to_global": og.tolist(), "planes": prec.polytope,
                              "nodes": plan.nodes[:, :2].tolist(), "status": prec.status})
            if not stopped_modules and k % k_ctrl == 0:
                mrec = ctrl.mpc_step(t, est.pose, plan.trajectory)
                if ctrl.safe_stop_request:
                    raise RuntimeError(f"tracking MPC failed without a fallback ({mrec.status})")
                ref_pose, ref_vel, _ = plan.trajectory.sample(t)
                ref_g = _odom_to_frame(ref_pose, og)
                truth = sim.x[:3]
                c, s = math.cos(truth[2]), math.sin(truth[2])
                dx, dy = ref_g[0] - truth[0], ref_g[1] - truth[1]
                # odom-frame position of a fixed global point: moves only when odom->global jumps
                anchor = se2_apply(se2_inverse(og), np.zeros((1, 2)))[0]
                ctrl_rows.append([t, *mrec.x_e, *mrec.v_o, *mrec.a_o, STATUS_CODES.get(mrec.status, 9),
                                  mrec.iterations, mrec.solve_time, float(mrec.fallback), mrec.kkt,
                                  mrec.constraint_violation, *ref_pose, ref_vel[0], ref_vel[2],
                                  c * dx + s * dy, -s * dx + c * dy, tracker_true.deviation(truth[:2]),
                                  anchor[0], anchor[1], -og[2], float(ctrl.saturation_count > 0)])
                ctrl.saturation_count = 0
            if not stopped_modules:
                sending = not (dropout and dropout[0] <= t < dropout[1])
                if sending:
                    cmd, _ = ctrl.inner_step(t, est.velocity, plan.trajectory, dt)
                    last_cmd_time = t
        except Exception as exc:  # any module failure ends in a safe stop
            log.error("module failure at t=%.3f: %s", t, exc)
            events.append((t, "module_failure", str(exc)))
            sim.trigger_safe_stop(f"module failure: {exc}")
            stopped_modules = True
        if not sim.safe_stop and watchdog.check(last_cmd_time, t):
            sim.trigger_safe_stop("watchdog timeout")
            stopped_modules = True
        if sim.safe_stop:
            stopped_modules = True
        sim.step(cmd)
        enc, imu, fixes = sim.read_sensors()
        n_acc = len(loc.tree.corrections)
        loc.step(sim.t, enc, imu, dt, fixes)
        corr = loc.tree.corrections[n_acc:]
        ci = 0
        for fix in fixes:
            accepted = ci < len(corr) and abs(corr[ci][0] - fix.t_meas) < 1e-12
            jump = corr[ci][1] if accepted else np.zeros(3)
            ci += int(accepted)
            loc_rows.append([sim.t, fix.t_meas, *fix.pose, *jump, float(accepted)])
        n_fix_seen += len(fixes)
        e = loc.filter.estimate
        eg = _odom_to_frame(e.pose, loc.tree.odom_to_global)
        sim_rows[k] = [sim.t, *sim.x, *eg, *e.velocity, *sim.delta, *sim.omega, *cmd.delta, *cmd.omega,
                       clearance(sim.x[:2]), float(sim.safe_stop)]

    for ev in sim.events:
        if ev not in events:
            events.append(ev)
    events.sort(key=lambda e: e[0])
    ctrl_arr = np.array(ctrl_rows, float).reshape(-1, len(CONTROLLER_COLUMNS))
    plan_arr = np.array(plan_rows, float).reshape(-1, len(PLANNER_COLUMNS))
    loc_arr = np.array(loc_rows, float).reshape(-1, len(LOCALIZATION_COLUMNS))
    summary = summarize(sim_rows, ctrl_arr, plan_arr, loc_arr, events, budget=ccfg.budget)
    summary["scenario"] = sc.name
    summary["seed"] = seed
    summary["realtime_measure"] = bool(realtime_measure)
    exit_code = EXIT_SAFE_STOP if summary["safe_stop"] else EXIT_OK
    summary["exit_code"] = exit_code
    runlog = RunLog(sim=sim_rows, controller=ctrl_arr, planner=plan_arr, localization=loc_arr, polytopes=polys,
                    events=events, summary=summary, exit_code=exit_code,
                    meta={"path": np.column_stack([sc.path.x, sc.path.y]), "obstacles": sc.obstacles,
                          "boundaries": sc.boundaries, "r_veh": r_veh, "budget": ccfg.budget})
    if n_steps == 0:
        log.warning("empty run: duration %.3f s gives no simulation steps", duration)
    if out_dir is not None:
        write_logs(runlog, out_dir)
    return runlog


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        if len(rows):
            np.savetxt(fh, rows, fmt=FMT, delimiter=",")


def write_logs(runlog, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sim.csv", SIM_COLUMNS, runlog.sim)
    _write_csv(out / "controller.csv", CONTROLLER_COLUMNS, runlog.controller)
    _write_csv(out / "planner.csv", PLANNER_COLUMNS, runlog.planner)
    _write_csv(out / "localization.csv", LOCALIZATION_COLUMNS, runlog.localization)
    with open(out / "polytopes.json", "w") as fh:
        json.dump(runlog.polytopes, fh, sort_keys=True)
    meta = runlog.meta
    with open(out / "scene.json", "w") as fh:
        json.dump({"path": np.asarray(meta.get("path", np.zeros((0, 2)))).tolist(),
                   "obstacles": np.asarray(meta.get("obstacles", np.zeros((0, 2)))).tolist(),
                   "boundaries": [np.asarray(b).tolist() for b in meta.get("boundaries", [])],
                   "r_veh": meta.get("r_veh"), "budget": meta.get("budget")}, fh, sort_keys=True)
    with open(out / "summary.json", "w") as fh:
        json.dump(runlog.summary, fh, indent=2, sort_keys=True)
    return out


def _read_csv(path, columns):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header != list(columns):
        raise ValueError(f"{path}: unexpected columns")
    with open(path) as fh:
        if len(fh.read().splitlines()) < 2:
            return np.zeros((0, len(columns)))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.reshape(-1, len(columns))


def load_logs(out_dir):
    """Read a run directory back into a :class:`RunLog`."""
    out = Path(out_dir)
    sim = _read_csv(out / "sim.csv", SIM_COLUMNS)
    ctrl = _read_csv(out / "controller.csv", CONTROLLER_COLUMNS)
    plan = _read_csv(out / "planner.csv", PLANNER_COLUMNS)
    loc = _read_csv(out / "localization.csv", LOCALIZATION_COLUMNS)
    polys = json.loads((out / "polytopes.json").read_text()) if (out / "polytopes.json").exists() else []
    summary = json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else {}
    meta = {}
    if (out / "scene.json").exists():
        scene = json.loads((out / "scene.json").read_text())
        meta = {"path": np.asarray(scene["path"], float).reshape(-1, 2),
                "obstacles": np.asarray(scene["obstacles"], float).reshape(-1, 2),
                "boundaries": [np.asarray(b, float) for b in scene["boundaries"]],
                "r_veh": scene["r_veh"], "budget": scene.get("budget")}
    return RunLog(sim=sim, controller=ctrl, planner=plan, localization=loc, polytopes=polys,
                  events=summary.get("events", []), summary=summary, exit_code=summary.get("exit_code", 0),
                  meta=meta)
