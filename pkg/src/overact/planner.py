"""Receding-horizon motion planning in a convex free-space polytope.

The planning model is a unicycle with velocity and yaw-rate states,
x_p = (x, y, psi, v_x, psi_dot), u_p = (a_x, psi_ddot).  Every cycle the model
is linearized along a rollout of the previous plan's (shifted) inputs,
condensed into a dense QP over the inputs plus one obstacle slack per stage,
solved once, and the optimal inputs are rolled out through the nonlinear
model to produce the timed reference for the tracking controller.
"""
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dynamics import wrap_angle
from .freespace import ConvexPolytope, InfeasibleFreespace, extract_polytope
from .qp import QpProblem, solve

log = logging.getLogger(__name__)

NX = 5
NU = 2


def planning_dynamics(x, u):
    x = np.asarray(x, float)
    return np.array([x[3] * math.cos(x[2]), x[3] * math.sin(x[2]), x[4], u[0], u[1]])


@dataclass
class PlannerConfig:
    rate: float = 5.0
    t_pred: float = 4.0
    dt: float = 0.2
    dt_out: float = 0.01
    w_xy: float = 10.0
    w_psi: float = 2.0
    w_v: float = 2.0
    w_u: tuple = (0.2, 0.2)
    w_du: float = 0.5
    w_obs: float = 500.0
    d_obs: float = 0.2
    thresholds: tuple = (0.10, 0.10, 0.15, 0.20, 0.30)
    a_max: float = 2.0
    psi_ddot_max: float = 3.0
    v_max: float = 3.0
    psi_dot_max: float = 2.0
    progress_accel: float = 0.8
    progress_lateral_accel: float = 0.8
    seed_length: float = 1.5
    max_planes: int = 24
    qp_tol: float = 1e-7
    qp_max_iter: int = 100
    stop_decel: float = 2.0
    # virtual solve time model used in deterministic runs
    virtual_overhead: float = 0.010
    virtual_iter_cost: float = 0.0015

    def virtual_time(self, iterations):
        return self.virtual_overhead + iterations * self.virtual_iter_cost

    @property
    def horizon(self):
        """Number of planning intervals (inputs); the plan has one more state."""
        return int(round(self.t_pred / self.dt))

    @property
    def substeps(self):
        return int(round(self.dt / self.dt_out))

    def validate(self):
        if abs(self.horizon * self.dt - self.t_pred) > 1e-9:
            raise ValueError("t_pred must be a multiple of the planning step")
        if abs(self.substeps * self.dt_out - self.dt) > 1e-9:
            raise ValueError("planning step must be a multiple of the output step")
        if abs(1.0 / self.rate - self.dt) > 1e-9:
            # the open-loop handover takes the previous plan's second entry
            raise ValueError("planner period must equal the planning step")
        if min(self.thresholds) <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class ReferencePath:
    """Dense path samples in the global frame with arc length and target speed."""

    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    v: np.ndarray
    s: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        self.y = np.asarray(self.y, float)
        self.psi = np.asarray(self.psi, float)
        self.v = np.asarray(self.v, float)
        seg = np.hypot(np.diff(self.x), np.diff(self.y))
        if np.any(seg <= 0):
            raise ValueError("consecutive path positions must be distinct")
        if np.any(self.v < 0):
            raise ValueError("path speeds must be non-negative")
        if self.s is None:
            self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.psi = np.unwrap(self.psi)
        self.curvature = np.gradient(self.psi, self.s) if len(self.s) > 2 else np.zeros_like(self.s)

    def __len__(self):
        return len(self.s)

    @property
    def length(self):
        return float(self.s[-1])

    def points(self):
        return np.column_stack([self.x, self.y])

    def interp(self, s):
        s = np.clip(s, 0.0, self.length)
        return (np.interp(s, self.s, self.x), np.interp(s, self.s, self.y),
                np.interp(s, self.s, self.psi), np.interp(s, self.s, self.v))

    def speed_profile(self, a_long, a_lat):
        """Target speed limited by lateral acceleration and by braking to rest at the path end."""
        v = np.minimum(self.v, np.sqrt(a_lat / np.maximum(np.abs(self.curvature), 1e-6)))
        v[-1] = 0.0
        ds = np.diff(self.s)
        for i in range(len(v) - 2, -1, -1):
            v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2.0 * a_long * ds[i]))
        return v

    def closest(self, p, s_lo=0.0, s_hi=None):
        """Arc length of the path point nearest to p within [s_lo, s_hi]."""
        s_hi = self.length if s_hi is None else s_hi
        i0 = int(np.searchsorted(self.s, s_lo, side="left"))
        i1 = int(np.searchsorted(self.s, s_hi, side="right"))
        i0 = max(0, min(i0, len(self.s) - 1))
        i1 = max(i0 + 1, min(i1, len(self.s)))
        d2 = (self.x[i0:i1] - p[0]) ** 2 + (self.y[i0:i1] - p[1]) ** 2
        j = i0 + int(np.argmin(d2))
        # refine on the adjacent segments
        best_s, best_d = self.s[j], d2[j - i0]
        for a in (j - 1, j):
            if 0 <= a < len(self.s) - 1:
                p0 = np.array([self.x[a], self.y[a]])
                d = np.array([self.x[a + 1], self.y[a + 1]]) - p0
                t = min(max(((np.asarray(p[:2]) - p0) @ d) / (d @ d), 0.0), 1.0)
                q = p0 + t * d
                dq = (q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2
                if dq < best_d:
                    best_d = dq
                    best_s = self.s[a] + t * (self.s[a + 1] - self.s[a])
        return float(best_s), math.sqrt(best_d)

    def distance_to(self, pts):
        """Distance from each point to the path polyline."""
        pts = np.asarray(pts, float).reshape(-1, 2)
        p0 = self.points()[:-1]
        d = np.diff(self.points(), axis=0)
        dd = np.einsum("ij,ij->i", d, d)
        out = np.empty(len(pts))
        for i, p in enumerate(pts):
            t = np.clip(((p - p0) * d).sum(axis=1) / dd, 0.0, 1.0)
            q = p0 + t[:, None] * d
            out[i] = np.sqrt(np.min(((q - p) ** 2).sum(axis=1)))
        return out


@dataclass
class ReferenceTrajectory:
    """Timed reference in the odom frame sampled at a uniform step."""

    t: np.ndarray
    pose: np.ndarray    # (M, 3)
    vel: np.ndarray     # (M, 3) body frame (v_x, v_y, psi_dot)
    acc: np.ndarray     # (M, 3) body frame (a_x, a_y, psi_ddot) in the sense of the force equations
    acc_left: np.ndarray = None   # left limits of acc at each sample; inputs may jump at a sample

    def __post_init__(self):
        if self.acc_left is None:
            self.acc_left = self.acc

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    @property
    def t_end(self):
        return float(self.t[-1])

    def index(self, t):
        return (t - self.t[0]) / self.dt

    def sample(self, t):
        """(pose, vel, acc) at time t, linear in between samples, held past the end."""
        f = self.index(t)
        i = int(math.floor(f + 1e-9))
        if i >= len(self.t) - 1:
            return self.pose[-1].copy(), self.vel[-1].copy(), self.acc[-1].copy()
        if i < 0:
            return self.pose[0].copy(), self.vel[0].copy(), self.acc[0].copy()
        w = f - i
        if w < 1e-9:
            return self.pose[i].copy(), self.vel[i].copy(), self.acc[i].copy()
        return (self.pose[i] + w * (self.pose[i + 1] - self.pose[i]),
                self.vel[i] + w * (self.vel[i + 1] - self.vel[i]),
                self.acc[i] + w * (self.acc_left[i + 1] - self.acc[i]))

    def window(self, t0, n, dt):
        """Samples at t0 + l*dt for l = 0..n (arrays of shape (n+1, 3))."""
        f = np.clip(self.index(t0 + dt * np.arange(n + 1)), 0.0, len(self.t) - 1)
        i = np.minimum(np.floor(f + 1e-9).astype(int), len(self.t) - 1)
        w = np.where(i < len(self.t) - 1, f - i, 0.0)
        w = np.where(w < 1e-9, 0.0, w)[:, None]
        j = np.minimum(i + 1, len(self.t) - 1)
        return (self.pose[i] + w * (self.pose[j] - self.pose[i]), self.vel[i] + w * (self.vel[j] - self.vel[i]),
                self.acc[i] + w * (self.acc_left[j] - self.acc[i]))


@dataclass
class Plan:
    """Planner output plus what the next cycle needs for warm starting."""

    t0: float
    trajectory: ReferenceTrajectory
    nodes: np.ndarray      # planner states at the planning step (N+1, 5)
    inputs: np.ndarray     # (N, 2)
    polytope: ConvexPolytope = None
    progress: float = 0.0

    def state_at(self, t):
        """Planner state (x, y, psi, v_x, psi_dot) at time t from the fine rollout."""
        pose, vel, _ = self.trajectory.sample(t)
        return np.array([pose[0], pose[1], pose[2], vel[0], vel[2]])


@dataclass
class PlanRecord:
    t: float
    branch: str
    status: str
    cost: float
    iterations: int
    solve_time: float
    n_planes: int
    violation_nodes: float
    violation_fine: float
    x_init: np.ndarray = field(repr=False, default=None)
    polytope: list = field(repr=False, default=None)


def stop_inputs(x0, n, dt, a_max, psi_ddot_max):
    """Inputs that brake the planning model to rest without overshoot."""
    u = np.zeros((n, 2))
    x = np.asarray(x0, float).copy()
    for k in range(n):
        u[k, 0] = min(max(-x[3] / dt, -a_max), a_max)
        u[k, 1] = min(max(-x[4] / dt, -psi_ddot_max), psi_ddot_max)
        x = kernels.plan_rollout(x, u[k:k + 1], dt, 1)[-1]
    return u


def build_trajectory(t0, x0, inputs, cfg):
    """Nonlinear rollout of the planning inputs, sampled at the output step."""
    sub = cfg.substeps
    fine = kernels.plan_rollout(np.asarray(x0, float), np.asarray(inputs, float), cfg.dt, sub)
    m = fine.shape[0]
    t = t0 + cfg.dt_out * np.arange(m)
    u_fine = np.repeat(inputs, sub, axis=0)
    u_fine = np.vstack([u_fine, inputs[-1:]])
    pose = fine[:, :3].copy()
    vel = np.column_stack([fine[:, 3], np.zeros(m), fine[:, 4]])
    # v_y stays zero, so the lateral force term must balance the Coriolis term
    acc = np.column_stack([u_fine[:, 0], fine[:, 3] * fine[:, 4], u_fine[:, 1]])
    acc_left = acc.copy()
    acc_left[1:, 0] = u_fine[:-1, 0]
    acc_left[1:, 2] = u_fine[:-1, 1]
    nodes = fine[::sub].copy()
    return ReferenceTrajectory(t=t, pose=pose, vel=vel, acc=acc, acc_left=acc_left), nodes


def condense_linear(x0, A, B, c):
    """x_k = S_k u + w_k for the stacked input vector u."""
    n = A.shape[0]
    nz = n * NU
    S = np.zeros((n + 1, NX, nz))
    w = np.zeros((n + 1, NX))
    w[0] = x0
    for k in range(n):
        S[k + 1] = A[k] @ S[k]
        S[k + 1][:, k * NU:(k + 1) * NU] += B[k]
        w[k + 1] = A[k] @ w[k] + c[k]
    return S, w


class Planner:
    """Stateful planning task: keeps the previous plan and path progress."""

    def __init__(self, path, config=None, boundaries=(), r_veh=0.7):
        self.path = path
        self.cfg = config or PlannerConfig()
        self.cfg.validate()
        self.boundaries = [np.asarray(b, float) for b in boundaries]
        self.r_veh = r_veh
        self.prev = None
        self.progress = 0.0
        self._vprof = path.speed_profile(self.cfg.progress_accel, self.cfg.progress_lateral_accel)
        self.records = []

    # -- helpers -------------------------------------------------------------

    def initial_state(self, t, measured):
        """Bi-level rule: continue the previous plan unless the deviation exceeds a threshold."""
        if self.prev is None:
            return np.asarray(measured, float).copy(), "bootstrap"
        x_prev = self.prev.state_at(t)
        dev = np.abs(np.asarray(measured, float) - x_prev)
        dev[2] = abs(wrap_angle(measured[2] - x_prev[2]))
        if np.any(dev > np.asarray(self.cfg.thresholds)):
            return np.asarray(measured, float).copy(), "reinit"
        return x_prev, "open_loop"

    def reference(self, x_init, odom_to_global):
        """Progress-based reference positions/headings/speeds for stages 1..N (odom frame)."""
        cfg = self.cfg
        n = cfg.horizon
        c, s = math.cos(odom_to_global[2]), math.sin(odom_to_global[2])
        pg = np.array([odom_to_global[0] + c * x_init[0] - s * x_init[1],
                       odom_to_global[1] + s * x_init[0] + c * x_init[1]])
        s0, _ = self.path.closest(pg, self.progress - 1.0, self.progress + 5.0)
        self.progress = s0
        v = max(float(x_init[3]), 0.0)
        s_k = np.empty(n + 1)
        v_k = np.empty(n + 1)
        s_k[0] = s0
        v_k[0] = min(v, np.interp(s0, self.path.s, self._vprof))
        for k in range(n):
            v_lim = float(np.interp(s_k[k], self.path.s, self._vprof))
            v_next = min(v_k[k] + cfg.progress_accel * cfg.dt, v_lim)
            s_k[k + 1] = min(s_k[k] + 0.5 * (v_k[k] + v_next) * cfg.dt, self.path.length)
            v_k[k + 1] = v_next if s_k[k + 1] < self.path.length else 0.0
        xr, yr, psir, _ = self.path.interp(s_k)
        # into the odom frame
        dx, dy = xr - odom_to_global[0], yr - odom_to_global[1]
        xo = c * dx + s * dy
        yo = -s * dx + c * dy
        psio = np.unwrap(psir - odom_to_global[2])
        psio += 2 * math.pi * round((x_init[2] - psio[0]) / (2 * math.pi))
        return np.column_stack([xo, yo, psio]), v_k

    # -- the QP --------------------------------------------------------------

    def build_qp(self, x_init, A, B, c, ref_pose, ref_v, poly, u_prev_first):
        cfg = self.cfg
        n = A.shape[0]
        nu_tot = n * NU
        nz = nu_tot + n
        S, w = condense_linear(x_init, A, B, c)
        H = np.zeros((nz, nz))
        g = np.zeros(nz)
        weights = np.array([cfg.w_xy, cfg.w_xy, cfg.w_psi, cfg.w_v, 0.0])
        for k in range(1, n + 1):
            target = np.array([ref_pose[k, 0], ref_pose[k, 1], ref_pose[k, 2], ref_v[k], 0.0])
            Sk = S[k]
            Wk = weights[:, None] * Sk
            H[:nu_tot, :nu_tot] += 2.0 * Sk.T @ Wk
            g[:nu_tot] += 2.0 * Wk.T @ (w[k] - target)
        wu = np.tile(np.asarray(cfg.w_u, float), n)
        H[np.arange(nu_tot), np.arange(nu_tot)] += 2.0 * wu
        if cfg.w_du > 0:
            D = np.zeros((nu_tot, nu_tot))
            for k in range(n):
                for j in range(NU):
                    i = k * NU + j
                    D[i, i] += 1.0
                    if k > 0:
                        D[i, i - NU] -= 1.0
            H[:nu_tot, :nu_tot] += 2.0 * cfg.w_du * D.T @ D
            g[:NU] += -2.0 * cfg.w_du * np.asarray(u_prev_first, float)
        H[nu_tot:, nu_tot:] += 2.0 * cfg.w_obs * np.eye(n)
        rows = []
        rhs = []
        # polytope rows on (x, y) of stages 1..N with slack
        for k in range(1, n + 1):
            Pk = S[k][:2]
            pk0 = w[k][:2]
            for a, bb in zip(poly.A, poly.b):
                row = np.zeros(nz)
                row[:nu_tot] = a @ Pk
                row[nu_tot + k - 1] = -1.0
                rows.append(row)
                rhs.append(bb - cfg.d_obs - a @ pk0)
        # state boxes on v_x and psi_dot
        for k in range(1, n + 1):
            for idx, lim in ((3, cfg.v_max), (4, cfg.psi_dot_max)):
                row = np.zeros(nz)
                row[:nu_tot] = S[k][idx]
                rows.append(row)
                rhs.append(lim - w[k][idx])
                rows.append(-row)
                rhs.append(lim + w[k][idx])
        # input boxes and slack range
        for i in range(nu_tot):
            lim = cfg.a_max if i % NU == 0 else cfg.psi_ddot_max
            row = np.zeros(nz)
            row[i] = 1.0
            rows.append(row)
            rhs.append(lim)
            rows.append(-row)
            rhs.append(lim)
        for k in range(n):
            row = np.zeros(nz)
            row[nu_tot + k] = 1.0
            rows.append(row)
            rhs.append(cfg.d_obs)
            rows.append(-row)
            rhs.append(0.0)
        return QpProblem(H=0.5 * (H + H.T), g=g, A_in=np.array(rows), b_in=np.array(rhs)), S, w

    # -- one cycle -----------------------------------------------------------

    def plan(self, t, measured, odom_to_global, cloud_odom, boundaries_odom=None, solve_time_fn=None):
        """Run one planning cycle.  ``measured`` is the planner state in the odom frame."""
        cfg = self.cfg
        n = cfg.horizon
        x_init, branch = self.initial_state(t, measured)
        bnd = self.boundaries if boundaries_odom is None else boundaries_odom
        t_start = time.perf_counter()
        if self.prev is not None:
            u_guess = np.vstack([self.prev.inputs[1:], self.prev.inputs[-1:]])
            u_first = self.prev.inputs[0]
        else:
            u_guess = np.zeros((n, NU))
            u_first = np.zeros(NU)
        status = "optimal"
        cost = float("nan")
        iters = 0
        poly = None
        try:
            poly = extract_polytope(cloud_odom, x_init[:3], bnd, self.r_veh, seed_length=cfg.seed_length,
                                    max_planes=cfg.max_planes)
        except InfeasibleFreespace as exc:
            log.warning("planner t=%.2f: %s", t, exc)
            status = "infeasible_freespace"
        inputs = None
        viol_nodes = 0.0
        if poly is not None:
            ref_pose, ref_v = self.reference(x_init, odom_to_global)
            _, A, B, c = kernels.plan_linearize(x_init, u_guess, cfg.dt)
            prob, S, w = self.build_qp(x_init, A, B, c, ref_pose, ref_v, poly, u_first)
            z0 = np.concatenate([u_guess.reshape(-1), np.zeros(n)])
            sol = solve(prob, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter, z0=z0)
            iters = sol.iterations
            status = sol.status
            if sol.optimal:
                inputs = sol.z[:n * NU].reshape(n, NU)
                cost = sol.objective
                lin = np.array([S[k][:2] @ sol.z[:n * NU] + w[k][:2] for k in range(1, n + 1)])
                viol_nodes = float(max(0.0, np.max(-poly.margins(lin))))
        wall = time.perf_counter() - t_start
        if inputs is None:
            if self.prev is not None and status != "infeasible_freespace" and self.prev.trajectory.t_end - t >= 1.0:
                # keep following the previous plan
                st = solve_time_fn(iters) if solve_time_fn else wall
                self.records.append(PlanRecord(t, branch, status, cost, iters, st, 0 if poly is None else len(poly),
                                               0.0, 0.0, x_init, None if poly is None else poly.to_list()))
                return self.prev, self.records[-1]
            inputs = stop_inputs(x_init, n, cfg.dt, cfg.stop_decel, cfg.psi_ddot_max)
            status = status if status != "optimal" else "stop"
        traj, nodes = build_trajectory(t, x_init, inputs, cfg)
        viol_fine = 0.0
        if poly is not None and inputs is not None:
            viol_fine = float(max(0.0, np.max(-poly.margins(traj.pose[1:, :2]))))
        plan = Plan(t0=t, trajectory=traj, nodes=nodes, inputs=inputs, polytope=poly, progress=self.progress)
        self.prev = plan
        rec = PlanRecord(t, branch, status, cost, iters, solve_time_fn(iters) if solve_time_fn else wall,
                         0 if poly is None else len(poly), viol_nodes, viol_fine, x_init,
                         None if poly is None else poly.to_list())
        self.records.append(rec)
        return plan, rec
