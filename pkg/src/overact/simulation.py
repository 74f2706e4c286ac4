"""Digital-twin plant: actuators, sensors with noise and latency, safe-stop watchdog."""
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dynamics import ActuatorCommand, ChassisGeometry, VehicleParams

log = logging.getLogger(__name__)


@dataclass
class ActuatorModel:
    tau_delta: float = 0.03
    tau_omega: float = 0.02
    steer_rate: float = 10.0     # rad/s
    drive_rate: float = 200.0    # rad/s^2
    latency: float = 0.002       # s, dead time
    delta_max: float = math.pi / 2
    omega_max: float = 40.0

    def validate(self, dt):
        if self.tau_delta < 0 or self.tau_omega < 0:
            raise ValueError("actuator time constants must be non-negative")
        if not (self.steer_rate > 0 and self.drive_rate > 0):
            raise ValueError("actuator rate limits must be positive")
        if self.latency < 0:
            raise ValueError("actuator latency must be non-negative")
        steps = self.latency / dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("actuator latency must be a multiple of the simulation step")

    @classmethod
    def ideal(cls, **kw):
        kw.setdefault("steer_rate", 1e9)
        kw.setdefault("drive_rate", 1e9)
        return cls(tau_delta=0.0, tau_omega=0.0, latency=0.0, **kw)


@dataclass
class SensorSuite:
    encoder_omega_std: float = 0.02
    encoder_delta_std: float = 0.002
    imu_accel_std: float = 0.05
    imu_gyro_std: float = 0.005
    imu_bias: tuple = (0.02, -0.02, 0.001)
    fix_rate: float = 2.0
    fix_latency: float = 0.1
    fix_pos_std: float = 0.02
    fix_psi_std: float = 0.01
    # piecewise constant offsets added to the fixes: rows (t_from, dx, dy, dpsi)
    fix_offsets: list = field(default_factory=list)
    lidar_range: float = 8.0
    lidar_std: float = 0.0

    def validate(self, dt):
        stds = (self.encoder_omega_std, self.encoder_delta_std, self.imu_accel_std, self.imu_gyro_std,
                self.fix_pos_std, self.fix_psi_std, self.lidar_std)
        if min(stds) < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if self.fix_rate >= 1.0 / dt:
            raise ValueError("global fix rate must be below the encoder rate")
        if self.fix_latency < 0:
            raise ValueError("fix latency must be non-negative")

    @classmethod
    def noiseless(cls, **kw):
        base = dict(encoder_omega_std=0.0, encoder_delta_std=0.0, imu_accel_std=0.0, imu_gyro_std=0.0,
                    imu_bias=(0.0, 0.0, 0.0), fix_pos_std=0.0, fix_psi_std=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class SimConfig:
    dt: float = 0.001
    watchdog_timeout: float = 0.1
    stop_decel: float = 3.0
    actuators: ActuatorModel = field(default_factory=ActuatorModel)
    sensors: SensorSuite = field(default_factory=SensorSuite)

    def validate(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.actuators.validate(self.dt)
        self.sensors.validate(self.dt)


@dataclass
class SimState:
    pose: np.ndarray       # true (x, y, psi) in the global frame
    velocity: np.ndarray   # true body velocity (v_x, v_y, psi_dot)
    delta: np.ndarray
    omega: np.ndarray
    t: float
    safe_stop: bool

    def speed(self):
        return float(math.hypot(self.velocity[0], self.velocity[1]))


@dataclass
class EncoderReading:
    omega: np.ndarray
    delta: np.ndarray


@dataclass
class ImuReading:
    ax: float
    ay: float
    yaw_rate: float


@dataclass
class GlobalFix:
    t_meas: float
    pose: np.ndarray


def lag_step(y, target, tau, rate, dt):
    """One step of a first-order lag followed by a rate limit (exact discretization)."""
    y_new = target + (y - target) * math.exp(-dt / tau) if tau > 0 else np.asarray(target, float)
    step = rate * dt
    return y + np.clip(y_new - y, -step, step)


def lag_inverse(y, target, tau, dt):
    """Command that moves a first-order lag from y exactly to target in one step."""
    if tau <= 0:
        return np.asarray(target, float).copy()
    e = math.exp(-dt / tau)
    return (np.asarray(target, float) - e * y) / (1.0 - e)


class Watchdog:
    """Latched command timeout."""

    def __init__(self, timeout=0.1):
        self.timeout = timeout
        self.latched = False

    def check(self, last_command_time, now):
        if now < last_command_time:
            raise ValueError("now precedes the last command time")
        if now - last_command_time > self.timeout + 1e-12:
            self.latched = True
        return self.latched

    def reset(self):
        self.latched = False


def watchdog_check(last_command_time, now, timeout, latched=False):
    return latched or (now - last_command_time > timeout)


class Simulator:
    """Fixed-step plant simulation.  Owns the true state and all noise streams."""

    def __init__(self, params=None, geom=None, config=None, seed=0, pose=(0.0, 0.0, 0.0),
                 velocity=(0.0, 0.0, 0.0), obstacles=None):
        self.params = params or VehicleParams()
        self.geom = geom or ChassisGeometry()
        self.config = config or SimConfig()
        self.config.validate()
        self.dt = self.config.dt
        self._tp = self.params.tire_array()
        self._G = np.ascontiguousarray(self.geom.G)
        self.x = np.concatenate([np.asarray(pose, float), np.asarray(velocity, float)])
        self.t = 0.0
        self.k = 0
        # actuators start matched to the initial velocity (free rolling)
        vxy = self.geom.G.T @ self.x[3:]
        self.delta = np.zeros(4)
        self.omega = np.zeros(4)
        for i in range(4):
            vx, vy = vxy[2 * i], vxy[2 * i + 1]
            if math.hypot(vx, vy) > 1e-9:
                d = math.atan2(vy, vx)
                sgn = 1.0
                if d > math.pi / 2:
                    d -= math.pi
                    sgn = -1.0
                elif d <= -math.pi / 2:
                    d += math.pi
                    sgn = -1.0
                self.delta[i] = d
                self.omega[i] = sgn * math.hypot(vx, vy) / self.params.tire_radius
        self.safe_stop = False
        self.events = []
        n_lat = int(round(self.config.actuators.latency / self.dt))
        idle = ActuatorCommand(self.delta.copy(), self.omega.copy())
        self._pipeline = deque([idle] * n_lat)
        self._stop_target = None
        self.obstacles = np.zeros((0, 2)) if obstacles is None else np.asarray(obstacles, float).reshape(-1, 2)

        ss = np.random.SeedSequence(seed)
        names = ("enc_omega", "enc_delta", "imu_acc", "imu_gyro", "fix", "lidar")
        self._rng = dict(zip(names, (np.random.default_rng(s) for s in ss.spawn(len(names)))))
        sens = self.config.sensors
        self._fix_period = 1.0 / sens.fix_rate if sens.fix_rate > 0 else math.inf
        self._fix_next = 1
        self._fix_queue = deque()
        self._accel = np.zeros(3)

    # -- state ---------------------------------------------------------------

    def state(self):
        return SimState(pose=self.x[:3].copy(), velocity=self.x[3:].copy(), delta=self.delta.copy(),
                        omega=self.omega.copy(), t=self.t, safe_stop=self.safe_stop)

    def trigger_safe_stop(self, reason):
        if not self.safe_stop:
            self.safe_stop = True
            self._stop_target = None
            self.events.append((self.t, "safe_stop", reason))
            log.warning("safe stop at t=%.3f: %s", self.t, reason)

    # -- dynamics ------------------------------------------------------------

    def _actuate(self, cmd):
        act = self.config.actuators
        dt = self.dt
        if self.safe_stop:
            if self._stop_target is None:
                self._stop_target = self.omega.copy()
            dw = self.config.stop_decel / self.params.tire_radius * dt
            self._stop_target = np.sign(self._stop_target) * np.maximum(np.abs(self._stop_target) - dw, 0.0)
            d_target = self.delta
            w_target = self._stop_target
        else:
            d_target = np.clip(cmd.delta, -act.delta_max, act.delta_max)
            w_target = np.clip(cmd.omega, -act.omega_max, act.omega_max)
        self.delta = lag_step(self.delta, d_target, act.tau_delta, act.steer_rate, dt)
        self.omega = lag_step(self.omega, w_target, act.tau_omega, act.drive_rate, dt)
        if self.safe_stop:
            # the stop ramp is the binding profile, never overshoot past zero
            self.omega = np.where(np.abs(self.omega) > np.abs(self._stop_target),
                                  np.sign(self.omega) * np.abs(self._stop_target), self.omega)

    def step(self, cmd):
        """Advance the plant by one step under ``cmd`` (subject to latency)."""
        if cmd is None or not cmd.is_finite():
            self.trigger_safe_stop("non-finite actuator command")
            cmd = ActuatorCommand(self.delta.copy(), np.zeros(4))
        if self._pipeline:
            self._pipeline.append(cmd)
            applied = self._pipeline.popleft()
        else:
            applied = cmd
        self._actuate(applied)
        p = self.params
        self.x = kernels.plant_rk4(self.x, self.delta, self.omega, self._G, p.mass, p.yaw_inertia,
                                   p.normal_loads, self._tp, self.dt)
        self._accel = np.array(kernels.body_accel(self.x[3], self.x[4], self.x[5], self.delta, self.omega,
                                                  self._G, p.mass, p.yaw_inertia, p.normal_loads, self._tp))
        self.k += 1
        self.t = self.k * self.dt
        self._schedule_fix()
        return self.state()

    # -- sensors -------------------------------------------------------------

    def _schedule_fix(self):
        sens = self.config.sensors
        t_meas = self._fix_next * self._fix_period
        if self.t + 1e-9 >= t_meas:
            rng = self._rng["fix"]
            noise = np.array([rng.normal() * sens.fix_pos_std, rng.normal() * sens.fix_pos_std,
                              rng.normal() * sens.fix_psi_std])
            pose = self.x[:3] + noise + self._fix_offset(t_meas)
            self._fix_queue.append(GlobalFix(t_meas=t_meas, pose=pose))
            self._fix_next += 1

    def _fix_offset(self, t):
        off = np.zeros(3)
        for row in self.config.sensors.fix_offsets:
            if t + 1e-12 >= row[0]:
                off = np.asarray(row[1:4], float)
        return off

    def read_encoders(self):
        sens = self.config.sensors
        return EncoderReading(
            omega=self.omega + self._rng["enc_omega"].normal(size=4) * sens.encoder_omega_std,
            delta=self.delta + self._rng["enc_delta"].normal(size=4) * sens.encoder_delta_std,
        )

    def read_imu(self):
        sens = self.config.sensors
        na = self._rng["imu_acc"].normal(size=2) * sens.imu_accel_std
        ng = self._rng["imu_gyro"].normal() * sens.imu_gyro_std
        b = sens.imu_bias
        return ImuReading(ax=self._accel[0] + b[0] + na[0], ay=self._accel[1] + b[1] + na[1],
                          yaw_rate=self.x[5] + b[2] + ng)

    def poll_fixes(self):
        """Fixes whose latency has elapsed, stamped with their measurement time."""
        out = []
        lat = self.config.sensors.fix_latency
        while self._fix_queue and self._fix_queue[0].t_meas + lat <= self.t + 1e-9:
            out.append(self._fix_queue.popleft())
        return out

    def read_sensors(self):
        return self.read_encoders(), self.read_imu(), self.poll_fixes()

    def scan(self):
        """Obstacle points within lidar range, in the body frame."""
        if self.obstacles.shape[0] == 0:
            return np.zeros((0, 2))
        d = self.obstacles - self.x[:2]
        keep = np.einsum("ij,ij->i", d, d) <= self.config.sensors.lidar_range ** 2
        d = d[keep]
        c, s = math.cos(self.x[2]), math.sin(self.x[2])
        body = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])
        std = self.config.sensors.lidar_std
        if std > 0:
            body = body + self._rng["lidar"].normal(size=body.shape) * std
        return body
