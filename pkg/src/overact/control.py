"""Trajectory tracking: offset MPC, flatness feedforward with PI feedback,
control allocation and actuator setpoints.

Desired values are reference plus offset, v_d = v_r + v_o and a_d = a_r + a_o.
The MPC chooses the offset acceleration a_o over a one-second horizon from
the body-frame pose error; the velocity loop turns a_d into a body wrench,
which the allocation spreads over the tires and the inverse tire model turns
into steering angles and wheel speeds.
"""
import logging
import math
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dynamics import ActuatorCommand, wrap_angle
from .qp import OPTIMAL, OcpProblem, solve_ocp
from .simulation import lag_inverse, lag_step

log = logging.getLogger(__name__)


def tracking_error(ref_pose, pose):
    """Reference minus measurement, rotated into the measured body frame."""
    c, s = math.cos(pose[2]), math.sin(pose[2])
    dx = ref_pose[0] - pose[0]
    dy = ref_pose[1] - pose[1]
    return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(ref_pose[2] - pose[2])])


def error_dynamics(x_e, v_o, v_r, psi_dot_d):
    """Time derivative of the body-frame tracking error for v_d = v_r + v_o."""
    xe, ye, pe = x_e
    vxr, vyr, rr = v_r
    vxd, vyd, rd = vxr + v_o[0], vyr + v_o[1], rr + v_o[2]
    return np.array([
        psi_dot_d * ye - vxd + vxr * math.cos(pe) - vyr * math.sin(pe),
        -psi_dot_d * xe - vyd + vxr * math.sin(pe) + vyr * math.cos(pe),
        rr - rd,
    ])


def offset_dynamics(v_o, a_o, v_r):
    """Time derivative of the offset velocity under offset acceleration a_o."""
    vxr, vyr, rr = v_r
    r_d = rr + v_o[2]
    return np.array([
        a_o[0] + r_d * (vyr + v_o[1]) - rr * vyr,
        a_o[1] - r_d * (vxr + v_o[0]) + rr * vxr,
        a_o[2],
    ])


def allocate(f_d, geom, d_fxy=None):
    """Minimum-norm tire forces for the body wrench plus a null-space part."""
    f = geom.G_plus @ np.asarray(f_d, float)
    if d_fxy is not None:
        f = f + geom.G_perp @ np.asarray(d_fxy, float)
    return f


def actuator_setpoints(f_xy, v_xy, params, delta_hint=None, delta_max=math.pi / 2, omega_max=np.inf):
    """Per-tire inverse tire model, clamped to the actuator limits.

    Returns (ActuatorCommand, flags) with per-tire flag bits: 1 force clipped,
    2 steering/branch limit, 4 wheel-speed clamp.
    """
    hint = np.zeros(4) if delta_hint is None else np.asarray(delta_hint, float)
    d, w, flags = kernels.tire_setpoints(np.asarray(f_xy, float), np.asarray(v_xy, float), params.normal_loads,
                                         params.tire_array(), params.eps_inv, hint, delta_max)
    over = np.abs(w) > omega_max
    if np.any(over):
        w = np.clip(w, -omega_max, omega_max)
        flags = flags | np.where(over, 4, 0)
    return ActuatorCommand(d, w), flags


@dataclass
class ControllerConfig:
    rate: float = 100.0
    t_pred: float = 1.0
    dt: float = 0.01
    Q: tuple = (50.0, 50.0, 20.0, 1.0, 1.0, 1.0)
    S_factor: float = 10.0
    R: tuple = (0.5, 0.5, 0.5)
    R_P: tuple = (4.0, 4.0, 4.0)
    R_I: tuple = (2.0, 2.0, 2.0)
    v_o_max: tuple = (0.5, 0.5, 0.5)
    a_o_max: tuple = (1.5, 1.5, 2.0)
    d_fxy: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    integrator_limit: float = 1.0
    mpc_tol: float = 1e-6
    mpc_max_iter: int = 40
    # virtual solve time model: overhead + iterations * per-iteration cost
    budget: float = 0.010
    virtual_overhead: float = 0.0005
    virtual_iter_cost: float = 0.0004
    delta_max: float = math.pi / 2
    omega_max: float = 40.0
    # invert the known actuator lag and dead time in the setpoints
    lag_compensation: bool = True
    # one-step correction passes of the tire-force inversion
    step_iterations: int = 8
    # the tire inversion uses a model prediction of the ground velocity that
    # is pulled toward the fused estimate at this rate (1/s)
    observer_gain: float = 2.0
    use_observer: bool = True
    step_tol: float = 1e-9

    @property
    def horizon(self):
        return int(round(self.t_pred / self.dt))

    def validate(self):
        if abs(self.horizon * self.dt - self.t_pred) > 1e-9:
            raise ValueError("t_pred must be a multiple of dt")
        if abs(1.0 / self.rate - self.dt) > 1e-9:
            raise ValueError("controller period must equal the MPC sample time")
        if min(self.Q) < 0 or self.S_factor < 0:
            raise ValueError("Q and S must be positive semidefinite")
        if min(self.R) <= 0:
            raise ValueError("R must be positive definite")

    def virtual_time(self, iterations):
        return self.virtual_overhead + iterations * self.virtual_iter_cost


@dataclass
class MpcSolution:
    t0: float
    x: np.ndarray      # (N+1, 6) predicted (x_e, v_o)
    u: np.ndarray      # (N, 3) offset accelerations

    def shifted(self, dt):
        x = np.vstack([self.x[1:], self.x[-1:]])
        u = np.vstack([self.u[1:], self.u[-1:]])
        return MpcSolution(self.t0 + dt, x, u)


@dataclass
class MpcRecord:
    t: float
    x_e: np.ndarray
    v_o: np.ndarray
    a_o: np.ndarray
    status: str
    iterations: int
    solve_time: float
    fallback: bool
    kkt: float
    constraint_violation: float


def offset_bounds(cfg, v_r=None, a_r=None):
    """Boxes for v_o and a_o.  The references are accepted so that callers can
    shrink the sets to keep v_d and a_d inside global limits."""
    return np.asarray(cfg.v_o_max, float), np.asarray(cfg.a_o_max, float)


class OffsetMpc:
    """Linearized offset MPC solved with the structured interior point method."""

    def __init__(self, cfg):
        self.cfg = cfg
        n = cfg.horizon
        q = np.diag(cfg.Q)
        self.Qs = np.tile(2.0 * q, (n + 1, 1, 1))
        self.Qs[0] = 0.0
        self.Qs[n] = 2.0 * cfg.S_factor * q
        self.Rs = np.tile(2.0 * np.diag(cfg.R), (n, 1, 1))
        self.qs = np.zeros((n + 1, 6))
        self.rs = np.zeros((n, 3))
        self.prev = None
        # measure wall-clock solve time and check the budget against it
        self.realtime = False
        # optional callable adding virtual solve time (scheduling noise)
        self.jitter = None

    def build(self, x0, u_guess, v_ref):
        cfg = self.cfg
        n = cfg.horizon
        _, A, B, c = kernels.mpc_linearize(x0, u_guess, v_ref, cfg.dt)
        v_max, a_max = offset_bounds(cfg)
        xlb = np.full((n + 1, 6), -np.inf)
        xub = np.full((n + 1, 6), np.inf)
        xlb[:, 3:] = -v_max
        xub[:, 3:] = v_max
        ulb = np.tile(-a_max, (n, 1))
        uub = np.tile(a_max, (n, 1))
        return OcpProblem(A=A, B=B, c=c, Q=self.Qs, q=self.qs, R=self.Rs, r=self.rs, x0=x0,
                          xlb=xlb, xub=xub, ulb=ulb, uub=uub)

    def step(self, t, x_e, v_ref, budget=None):
        """One MPC cycle.  Returns (a_o, MpcRecord); a_o is None if no solution exists at all."""
        cfg = self.cfg
        n = cfg.horizon
        budget = cfg.budget if budget is None else budget
        if self.prev is not None:
            v_o0 = self.prev.x[1, 3:].copy()
            u_guess = np.vstack([self.prev.u[1:], self.prev.u[-1:]])
        else:
            v_o0 = np.zeros(3)
            u_guess = np.zeros((n, 3))
        x0 = np.concatenate([x_e, v_o0])
        prob = self.build(x0, u_guess, v_ref)
        t_wall = time.perf_counter()
        sol = solve_ocp(prob, u_init=u_guess, tol=cfg.mpc_tol, max_iter=cfg.mpc_max_iter)
        t_wall = time.perf_counter() - t_wall
        if self.realtime:
            vtime = t_wall
        else:
            vtime = cfg.virtual_time(sol.iterations)
            if self.jitter is not None:
                vtime += self.jitter()
        fallback = False
        if sol.status == OPTIMAL and vtime <= budget:
            current = MpcSolution(t, sol.x, sol.u)
        elif self.prev is not None:
            fallback = True
            current = self.prev.shifted(cfg.dt)
            current.x[0, :3] = x_e
        else:
            self.prev = None
            rec = MpcRecord(t, x_e, v_o0, np.zeros(3), sol.status, sol.iterations, vtime, True,
                            sol.kkt.max(), 0.0)
            return None, rec
        v_max, a_max = offset_bounds(cfg)
        viol = max(float(np.max(np.abs(current.x[1:, 3:]) - v_max)), float(np.max(np.abs(current.u) - a_max)), 0.0)
        self.prev = current
        rec = MpcRecord(t, x_e.copy(), current.x[0, 3:].copy(), current.u[0].copy(), sol.status,
                        sol.iterations, vtime, fallback, sol.kkt.max(), viol)
        return current.u[0].copy(), rec


class LagCompensator:
    """Internal copy of the actuator chain: dead time, first-order lag, rate limit and clamp.

    It knows every command still in flight, so it can predict the actuator
    state at the moment a new command takes effect and choose the command
    that makes the lag land exactly on the requested setpoint.
    """

    def __init__(self, actuators, dt, delta0, omega0):
        self.act = actuators
        self.dt = dt
        self.n_lat = int(round(actuators.latency / dt))
        self.delta = np.asarray(delta0, float).copy()
        self.omega = np.asarray(omega0, float).copy()
        self.queue = deque([ActuatorCommand(self.delta.copy(), self.omega.copy())] * self.n_lat)

    def _apply(self, d, w, cmd):
        a = self.act
        d_t = np.clip(cmd.delta, -a.delta_max, a.delta_max)
        w_t = np.clip(cmd.omega, -a.omega_max, a.omega_max)
        return lag_step(d, d_t, a.tau_delta, a.steer_rate, self.dt), lag_step(w, w_t, a.tau_omega, a.drive_rate, self.dt)

    def pending(self):
        """Actuator states during each in-flight step and the state before the next command applies."""
        states = []
        d, w = self.delta, self.omega
        for cmd in self.queue:
            d, w = self._apply(d, w, cmd)
            states.append((d, w))
        return states, (d, w)

    def command(self, d_target, w_target, d_before, w_before):
        a = self.act
        u = ActuatorCommand(np.clip(lag_inverse(d_before, d_target, a.tau_delta, self.dt), -a.delta_max, a.delta_max),
                            np.clip(lag_inverse(w_before, w_target, a.tau_omega, self.dt), -a.omega_max, a.omega_max))
        if self.n_lat:
            self.queue.append(u)
            applied = self.queue.popleft()
        else:
            applied = u
        self.delta, self.omega = self._apply(self.delta, self.omega, applied)
        return u


@dataclass
class InnerRecord:
    a_dd: np.ndarray
    f_d: np.ndarray
    flags: int
    residual: float = 0.0


class TrackingController:
    """Position MPC at the controller rate plus the velocity loop at the plant rate."""

    def __init__(self, geom, params, cfg=None, feedback=True, actuators=None, dt=0.001, delta0=None, omega0=None,
                 velocity0=None):
        self.geom = geom
        self.params = params
        self.cfg = cfg or ControllerConfig()
        self.cfg.validate()
        self.mpc = OffsetMpc(self.cfg)
        self.feedback = feedback
        self.integ = np.zeros(3)
        d0 = np.zeros(4) if delta0 is None else np.asarray(delta0, float)
        w0 = np.zeros(4) if omega0 is None else np.asarray(omega0, float)
        self.last_target = ActuatorCommand(d0.copy(), w0.copy())
        self.comp = None
        if actuators is not None and self.cfg.lag_compensation:
            self.comp = LagCompensator(actuators, dt, d0, w0)
        self.v_model = np.zeros(3) if velocity0 is None else np.asarray(velocity0, float).copy()
        self.solution = None
        self.safe_stop_request = False
        self.saturation_count = 0
        self._rp = np.asarray(self.cfg.R_P, float)
        self._ri = np.asarray(self.cfg.R_I, float)
        self._f_null = geom.G_perp @ np.asarray(self.cfg.d_fxy, float)
        self._G = np.ascontiguousarray(geom.G)
        self._Gp = np.ascontiguousarray(geom.G_plus)
        self._tp = params.tire_array()

    def mpc_step(self, t, pose, traj, budget=None):
        n = self.cfg.horizon
        ref_pose, ref_vel, _ = traj.window(t, n, self.cfg.dt)
        x_e = tracking_error(ref_pose[0], pose)
        a_o, rec = self.mpc.step(t, x_e, ref_vel, budget=budget)
        if a_o is None:
            self.safe_stop_request = True
            self.solution = None
        else:
            self.solution = self.mpc.prev
        return rec

    def offset_at(self, t):
        """(v_o, a_o) at time t inside the current MPC interval."""
        sol = self.solution
        if sol is None or not self.feedback:
            return np.zeros(3), np.zeros(3)
        w = min(max((t - sol.t0) / self.cfg.dt, 0.0), 1.0)
        v_o = sol.x[0, 3:] + w * (sol.x[1, 3:] - sol.x[0, 3:])
        return v_o, sol.u[0].copy()

    def desired(self, t, traj):
        _, v_r, a_r = traj.sample(t)
        v_o, a_o = self.offset_at(t)
        return v_r + v_o, a_r + a_o

    def velocity_control(self, v_d, a_d, v_hat, dt):
        e = v_d - v_hat
        if self.feedback:
            lim = self.cfg.integrator_limit
            self.integ = np.clip(self.integ + e * dt, -lim, lim)
            return a_d + self._rp * e + self._ri * self.integ
        return np.asarray(a_d, float).copy()

    def _predict(self, v, states, dt):
        p = self.params
        x = np.zeros(6)
        x[3:] = v
        for d, w in states:
            x = kernels.plant_rk4(x, d, w, self._G, p.mass, p.yaw_inertia, p.normal_loads, self._tp, dt)
        return x[3:].copy()

    def inner_step(self, t, v_hat, traj, dt):
        """Velocity loop, allocation and actuator setpoints for one plant step of length dt."""
        v_hat = np.asarray(v_hat, float)
        cfg = self.cfg
        p = self.params
        if cfg.use_observer:
            # the tires are stiff: a small velocity error turns into a large force error,
            # so the inversion works on the model's ground velocity, anchored to the estimate
            self.v_model = self.v_model + min(cfg.observer_gain * dt, 1.0) * (v_hat - self.v_model)
            v_base = self.v_model
        else:
            v_base = v_hat
        if self.comp is not None:
            states, (d_before, w_before) = self.comp.pending()
            v_inv = self._predict(v_base, states, dt)
            v_fb = self._predict(v_hat, states, dt) if cfg.use_observer else v_inv
            t_app = t + len(states) * dt
        else:
            v_inv, v_fb, t_app = v_base, v_hat, t
        v_d, _ = self.desired(t_app, traj)
        _, a_d = self.desired(t_app + 0.5 * dt, traj)
        a_dd = self.velocity_control(v_d, a_d, v_fb, dt)
        d, w, flags, a_used, res = kernels.step_setpoints(
            v_inv, a_dd, self._G, self._Gp, self._f_null, p.mass, p.yaw_inertia, p.normal_loads, self._tp,
            p.eps_inv, self.last_target.delta, cfg.delta_max, dt, cfg.step_iterations, cfg.step_tol)
        over = np.abs(w) > cfg.omega_max
        if np.any(over):
            w = np.clip(w, -cfg.omega_max, cfg.omega_max)
            flags = flags | np.where(over, 4, 0)
        agg = int(np.bitwise_or.reduce(flags))
        if agg:
            self.saturation_count += 1
        self.last_target = ActuatorCommand(d, w)
        if self.comp is not None:
            cmd = self.comp.command(d, w, d_before, w_before)
            d_now, w_now = self.comp.delta, self.comp.omega
        else:
            cmd = ActuatorCommand(d, w)
            d_now, w_now = d, w
        if cfg.use_observer:
            x = np.zeros(6)
            x[3:] = self.v_model
            self.v_model = kernels.plant_rk4(x, d_now, w_now, self._G, p.mass, p.yaw_inertia, p.normal_loads,
                                             self._tp, dt)[3:].copy()
        f_d = np.array([p.mass * a_used[0], p.mass * a_used[1], p.yaw_inertia * a_used[2]])
        return cmd, InnerRecord(a_dd=a_dd, f_d=f_d, flags=agg, residual=float(res))
