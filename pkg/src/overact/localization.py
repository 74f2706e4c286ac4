"""Encoder odometry, IMU-aided velocity filter and the global/odom/body frame tree."""
import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from ._jit import njit
from .dynamics import Pose, wrap_angle
from .kernels import pose_rk4

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# SE(2) helpers, poses stored as arrays (x, y, psi)
# ---------------------------------------------------------------------------


def se2_compose(a, b):
    c, s = math.cos(a[2]), math.sin(a[2])
    return np.array([a[0] + c * b[0] - s * b[1], a[1] + s * b[0] + c * b[1], a[2] + b[2]])


def se2_inverse(a):
    c, s = math.cos(a[2]), math.sin(a[2])
    return np.array([-c * a[0] - s * a[1], s * a[0] - c * a[1], -a[2]])


def se2_apply(a, pts):
    """Map points (n, 2) through the transform ``a``."""
    c, s = math.cos(a[2]), math.sin(a[2])
    pts = np.asarray(pts, float).reshape(-1, 2)
    return np.column_stack([a[0] + c * pts[:, 0] - s * pts[:, 1], a[1] + s * pts[:, 0] + c * pts[:, 1]])


# ---------------------------------------------------------------------------
# encoder odometry
# ---------------------------------------------------------------------------


@dataclass
class OdomEstimate:
    pose: np.ndarray        # (x, y, psi) in the odom frame, psi unwrapped
    velocity: np.ndarray    # (v_x, v_y, psi_dot) body frame
    cov: np.ndarray         # 6x6 over (pose, velocity)

    def as_pose(self):
        return Pose(self.pose[0], self.pose[1], self.pose[2], frame="odom")

    @classmethod
    def zero(cls, pose=(0.0, 0.0, 0.0)):
        return cls(np.asarray(pose, float).copy(), np.zeros(3), np.eye(6) * 1e-6)


def encoder_tire_velocities(omega, delta, r_dyn):
    omega = np.asarray(omega, float)
    delta = np.asarray(delta, float)
    v = np.empty(8)
    v[0::2] = omega * r_dyn * np.cos(delta)
    v[1::2] = omega * r_dyn * np.sin(delta)
    return v


def encoder_velocity(omega, delta, geom, params):
    return geom.Gbar_plus @ encoder_tire_velocities(omega, delta, params.tire_radius)


def encoder_velocity_cov(omega, delta, geom, params, omega_std, delta_std, floor=0.01):
    """Covariance of the encoder velocity estimate, plus an isotropic floor for tire slip."""
    r = params.tire_radius
    delta = np.asarray(delta, float)
    along = np.stack([np.cos(delta), np.sin(delta)], axis=1)
    across = np.stack([-along[:, 1], along[:, 0]], axis=1)
    # per-tire Jacobian columns mapped through the pseudoinverse: cov = m m^T
    gb = geom.Gbar_plus.reshape(3, 4, 2)
    m = np.concatenate([
        np.einsum("jik,ik->ji", gb, along) * (r * omega_std),
        np.einsum("jik,ik->ji", gb, across) * (r * delta_std * np.asarray(omega, float)),
    ], axis=1)
    return m @ m.T + floor ** 2 * np.eye(3)


def encoder_odometry_step(omega, delta, geom, params, dt, prev):
    """Dead reckoning from encoders alone: velocity from the tires, pose by RK4."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    v = encoder_velocity(omega, delta, geom, params)
    pose = pose_rk4(np.asarray(prev.pose, float), v[0], v[1], v[2], dt)
    return OdomEstimate(pose=pose, velocity=v, cov=prev.cov.copy())


# ---------------------------------------------------------------------------
# velocity EKF
# ---------------------------------------------------------------------------


@njit
def odom_ekf_step(pose, vel, cov, imu, z_enc, r_enc, gyro_var, q_diag, dt):
    """Predict the velocity with IMU accelerations, fuse encoder velocity and gyro.

    The filter state is the velocity only.  The pose is integrated with the
    fused velocity and its covariance block is propagated alongside (the
    pose/velocity cross terms are not tracked).  Returns (pose, vel, cov,
    ok); ``ok`` is False when the update produced a non-SPD covariance, in
    which case the prediction is kept.
    """
    vx, vy, r = vel[0], vel[1], vel[2]
    ax, ay, gyro = imu[0], imu[1], imu[2]
    vp = np.empty(3)
    vp[0] = vx + dt * (vy * r + ax)
    vp[1] = vy + dt * (-vx * r + ay)
    vp[2] = r
    fv = np.eye(3)
    fv[0, 1] = dt * r
    fv[0, 2] = dt * vy
    fv[1, 0] = -dt * r
    fv[1, 2] = -dt * vx
    pv = np.ascontiguousarray(cov[3:, 3:])
    pp = fv @ pv @ fv.T
    for i in range(3):
        pp[i, i] += q_diag[i] * q_diag[i] * dt
    # measurement: encoder velocity (3) and gyro yaw rate (1)
    h = np.zeros((4, 3))
    h[0, 0] = 1.0
    h[1, 1] = 1.0
    h[2, 2] = 1.0
    h[3, 2] = 1.0
    rm = np.zeros((4, 4))
    rm[:3, :3] = r_enc
    rm[3, 3] = gyro_var
    innov = np.empty(4)
    innov[0] = z_enc[0] - vp[0]
    innov[1] = z_enc[1] - vp[1]
    innov[2] = z_enc[2] - vp[2]
    innov[3] = gyro - vp[2]
    s = h @ pp @ h.T + rm
    k = pp @ h.T @ np.linalg.inv(s)
    ikh = np.eye(3) - k @ h
    post = ikh @ pp @ ikh.T + k @ rm @ k.T
    post = 0.5 * (post + post.T)
    ok = True
    for i in range(4):
        if not math.isfinite(innov[i]):
            ok = False
    if ok:
        for i in range(3):
            if not math.isfinite(post[i, i]):
                ok = False
    if ok and np.linalg.eigvalsh(post)[0] <= 0.0:
        ok = False
    vn = vp.copy()
    if ok:
        vn = vp + k @ innov
    else:
        post = pp
    newpose = pose_rk4(pose, vn[0], vn[1], vn[2], dt)
    c = math.cos(pose[2])
    sn = math.sin(pose[2])
    gp = np.eye(3)
    gp[0, 2] = dt * (-sn * vn[0] - c * vn[1])
    gp[1, 2] = dt * (c * vn[0] - sn * vn[1])
    gv = np.zeros((3, 3))
    gv[0, 0] = dt * c
    gv[0, 1] = -dt * sn
    gv[1, 0] = dt * sn
    gv[1, 1] = dt * c
    gv[2, 2] = dt
    out = np.zeros((6, 6))
    ppose = gp @ np.ascontiguousarray(cov[:3, :3]) @ gp.T + gv @ post @ gv.T
    out[:3, :3] = 0.5 * (ppose + ppose.T)
    out[3:, 3:] = post
    return newpose, vn, out, ok


@dataclass
class EkfNoise:
    process: tuple = (0.05, 0.05, 0.02)
    slip_floor: float = 0.01


class VelocityFilter:
    """EKF over (v_x, v_y, psi_dot) with the pose integrated alongside."""

    def __init__(self, geom, params, sensors, noise=None, pose=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0)):
        self.geom = geom
        self.params = params
        self.sensors = sensors
        self.noise = noise or EkfNoise()
        self.estimate = OdomEstimate(np.asarray(pose, float).copy(), np.asarray(velocity, float).copy(),
                                     np.diag([1e-6, 1e-6, 1e-6, 1e-4, 1e-4, 1e-4]))
        self.warnings = 0
        self.raw_velocity = np.asarray(velocity, float).copy()
        self._q = np.asarray(self.noise.process, float)
        self._gyro_var = max(sensors.imu_gyro_std, 1e-4) ** 2

    def step(self, enc, imu, dt):
        v_enc = encoder_velocity(enc.omega, enc.delta, self.geom, self.params)
        self.raw_velocity = v_enc
        r_enc = encoder_velocity_cov(enc.omega, enc.delta, self.geom, self.params,
                                     self.sensors.encoder_omega_std, self.sensors.encoder_delta_std,
                                     self.noise.slip_floor)
        est = self.estimate
        pose, vel, cov, ok = odom_ekf_step(est.pose, est.velocity, est.cov,
                                           np.array([imu.ax, imu.ay, imu.yaw_rate]), v_enc, r_enc,
                                           self._gyro_var, self._q, dt)
        if not ok:
            self.warnings += 1
            log.warning("velocity filter produced a non-SPD covariance, keeping the prior")
        self.estimate = OdomEstimate(pose, vel, cov)
        return self.estimate


# ---------------------------------------------------------------------------
# frame tree
# ---------------------------------------------------------------------------


class FrameTree:
    """odom->global (jumps on fixes) and body->odom (continuous) with a pose history."""

    def __init__(self, odom_in_global=(0.0, 0.0, 0.0), horizon=2.0, sample_dt=0.01):
        self.odom_to_global = np.asarray(odom_in_global, float).copy()
        self.body_to_odom = np.zeros(3)
        self.t_odom_update = 0.0
        self.t_global_update = -math.inf
        self.horizon = horizon
        self.sample_dt = sample_dt
        self._hist = deque()
        self.rejected = 0
        self.corrections = []

    def update_body(self, t, pose):
        self.body_to_odom = np.asarray(pose, float).copy()
        self.t_odom_update = t
        if not self._hist or t - self._hist[-1][0] >= self.sample_dt - 1e-9:
            self._hist.append((t, self.body_to_odom.copy()))
            while self._hist and self._hist[0][0] < t - self.horizon - 1e-9:
                self._hist.popleft()

    def body_to_odom_at(self, t):
        """Interpolated body->odom pose at time t, or None outside the buffer."""
        if not self._hist:
            return None
        t0 = self._hist[0][0]
        t1 = self._hist[-1][0]
        if t < t0 - 1e-9:
            return None
        if t >= t1 - 1e-9:
            if t - t1 > self.sample_dt + 1e-9:
                return None
            return self._hist[-1][1].copy() if t - t1 < 1e-9 else self.body_to_odom.copy()
        times = [h[0] for h in self._hist]
        j = int(np.searchsorted(times, t))
        if abs(times[j] - t) < 1e-9:
            return self._hist[j][1].copy()
        ta, pa = self._hist[j - 1]
        tb, pb = self._hist[j]
        w = (t - ta) / (tb - ta)
        return pa + w * (pb - pa)

    def body_to_global(self):
        return se2_compose(self.odom_to_global, self.body_to_odom)

    def to_odom(self, pose_global):
        return se2_compose(se2_inverse(self.odom_to_global), pose_global)

    def apply_global_fix(self, t_fix, fix_pose):
        """Re-solve odom->global so that the composition matches the fix at t_fix.

        body->odom is never touched.  Returns False (and logs) for fixes
        outside the history buffer.
        """
        b_o = self.body_to_odom_at(t_fix)
        if b_o is None:
            self.rejected += 1
            log.warning("global fix at t=%.3f outside the history buffer, rejected", t_fix)
            return False
        new = se2_compose(np.asarray(fix_pose, float), se2_inverse(b_o))
        new[2] = wrap_angle(new[2])
        jump = new - self.odom_to_global
        jump[2] = wrap_angle(jump[2])
        self.corrections.append((t_fix, jump))
        self.odom_to_global = new
        self.t_global_update = t_fix
        return True


class Localizer:
    """Velocity filter + frame tree, driven once per simulation step."""

    def __init__(self, geom, params, sensors, initial_global=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0),
                 noise=None, history=2.0, sample_dt=0.01):
        self.filter = VelocityFilter(geom, params, sensors, noise=noise, velocity=velocity)
        self.tree = FrameTree(odom_in_global=initial_global, horizon=history, sample_dt=sample_dt)
        self.tree.update_body(0.0, self.filter.estimate.pose)

    def step(self, t, enc, imu, dt, fixes=()):
        est = self.filter.step(enc, imu, dt)
        self.tree.update_body(t, est.pose)
        for fix in fixes:
            self.tree.apply_global_fix(fix.t_meas, fix.pose)
        return est

    @property
    def pose_odom(self):
        return self.filter.estimate.pose

    @property
    def velocity(self):
        return self.filter.estimate.velocity
