"""Vehicle parameters, tire model, tire-chassis coupling and horizontal dynamics.

Conventions
-----------
Tires are ordered fl, fr, rl, rr.  Stacked tire vectors interleave x and y
components: ``F_xy = (F_fl,x, F_fl,y, F_fr,x, ...)``.  The actuator command
is ``(delta_fl, delta_fr, delta_rl, delta_rr, omega_fl, ..., omega_rr)``.
All angles are radians.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

GRAVITY = 9.81
TIRES = ("fl", "fr", "rl", "rr")
FRAMES = ("global", "odom", "body")


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def rot2(psi):
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


@dataclass
class VehicleParams:
    mass: float = 69.0
    yaw_inertia: float = 10.7
    tire_radius: float = 0.1
    enclosing_radius: float = 0.70
    length: float = 1.17
    B: float = 7.0
    C: float = 1.6
    D: float = 1.0
    mu: float = 0.9
    normal_loads: np.ndarray = None
    eps_v: float = 0.05
    eps_inv: float = 1e-3

    def __post_init__(self):
        if self.normal_loads is None:
            self.normal_loads = np.full(4, self.mass * GRAVITY / 4.0)
        self.normal_loads = np.asarray(self.normal_loads, dtype=float).reshape(4)
        self.validate()

    def validate(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if not self.yaw_inertia > 0:
            raise ValueError("yaw_inertia must be positive")
        if not self.tire_radius > 0:
            raise ValueError("tire_radius must be positive")
        if not self.enclosing_radius > 0:
            raise ValueError("enclosing_radius must be positive")
        if not np.all(self.D * self.mu * self.normal_loads > 0):
            raise ValueError("D * mu * F_z must be positive for every tire")
        if not (self.B > 0 and self.C > 0 and self.eps_v > 0):
            raise ValueError("tire shape coefficients must be positive")

    def tire_array(self):
        """Packed tire coefficients used by the numeric kernels."""
        return np.array([self.tire_radius, self.B, self.C, self.D, self.mu, self.eps_v])

    def max_force(self):
        return self.mu * self.D * self.normal_loads * kernels.tire_peak_ratio(self.C)


def coupling_matrix(s, l):
    """3x8 map from stacked tire forces to the body wrench (F_x, F_y, M_z)."""
    s_fl, s_fr, s_rl, s_rr = s
    l_fl, l_fr, l_rl, l_rr = l
    return np.array([
        [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        [-s_fl, l_fl, s_fr, l_fr, -s_rl, -l_rl, s_rr, -l_rr],
    ])


@dataclass(frozen=True)
class ChassisGeometry:
    """Tire lever arms (all entries non-negative distances from the COG)."""

    s: tuple = (0.25, 0.25, 0.25, 0.25)
    l: tuple = (0.35, 0.35, 0.35, 0.35)
    G: np.ndarray = field(init=False, repr=False, compare=False)
    G_plus: np.ndarray = field(init=False, repr=False, compare=False)
    G_perp: np.ndarray = field(init=False, repr=False, compare=False)
    Gbar_plus: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = tuple(float(v) for v in self.s)
        l = tuple(float(v) for v in self.l)
        if len(s) != 4 or len(l) != 4:
            raise ValueError("need four lateral and four longitudinal offsets")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "l", l)
        g = coupling_matrix(s, l)
        if np.linalg.matrix_rank(g) < 3:
            raise ValueError("degenerate geometry: coupling matrix is rank deficient")
        # orthonormal null-space basis from the SVD
        _, _, vt = np.linalg.svd(g)
        g_perp = vt[3:].T.copy()
        for name, val in (("G", g), ("G_plus", np.linalg.pinv(g)),
                          ("G_perp", g_perp), ("Gbar_plus", np.linalg.pinv(g.T))):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def symmetric(cls, half_track=0.25, half_base=0.35):
        return cls(s=(half_track,) * 4, l=(half_base,) * 4)

    def tire_positions(self):
        """Contact points (x, y) in the body frame, ordered fl, fr, rl, rr."""
        s, l = self.s, self.l
        return np.array([[l[0], s[0]], [l[1], -s[1]], [-l[2], s[2]], [-l[3], -s[3]]])


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    psi: float
    frame: str = "global"

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def as_array(self):
        return np.array([self.x, self.y, self.psi])


@dataclass
class ActuatorCommand:
    delta: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float).reshape(4)
        self.omega = np.asarray(self.omega, dtype=float).reshape(4)

    @classmethod
    def from_vector(cls, u):
        u = np.asarray(u, dtype=float)
        return cls(u[:4], u[4:])

    def as_vector(self):
        return np.concatenate([self.delta, self.omega])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.delta)) and np.all(np.isfinite(self.omega)))

    def within_limits(self, delta_max, omega_max):
        return bool(np.all(np.abs(self.delta) <= delta_max) and np.all(np.abs(self.omega) <= omega_max))


# ---------------------------------------------------------------------------
# tire model
# ---------------------------------------------------------------------------


def tire_force(omega, delta, v_contact, params, tire=0):
    """Body-frame force (F_x, F_y) of one tire."""
    fx, fy = kernels.tire_force(float(omega), float(delta), float(v_contact[0]), float(v_contact[1]),
                                float(params.normal_loads[tire]), params.tire_array())
    return np.array([fx, fy])


def tire_forces(command, v_xy, params):
    """Stacked 8-vector of tire forces for all four tires."""
    return kernels.tire_forces(np.asarray(command.delta, dtype=float), np.asarray(command.omega, dtype=float),
                               np.asarray(v_xy, dtype=float), params.normal_loads, params.tire_array())


def tire_force_inverse(force, v_contact, params, tire=0, delta_hint=0.0, delta_max=math.pi / 2):
    """Steering angle and wheel speed producing ``force`` at contact velocity ``v_contact``.

    Returns ``(delta, omega, saturated)``.  ``saturated`` is true when the
    requested force had to be clipped to the invertible range or the
    steering limit was active.
    """
    d, w, flags = kernels.tire_force_inverse(
        float(force[0]), float(force[1]), float(v_contact[0]), float(v_contact[1]),
        float(params.normal_loads[tire]), params.tire_array(), params.eps_inv,
        float(delta_hint), float(delta_max))
    return d, w, bool(flags)


# ---------------------------------------------------------------------------
# rigid body
# ---------------------------------------------------------------------------


def forces_to_body(f_xy, geom):
    return geom.G @ np.asarray(f_xy, dtype=float)


def body_to_tire_velocities(v_cog, geom):
    return geom.G.T @ np.asarray(v_cog, dtype=float)


def body_acceleration(f_cog, params):
    f_cog = np.asarray(f_cog, dtype=float)
    return np.array([f_cog[0] / params.mass, f_cog[1] / params.mass, f_cog[2] / params.yaw_inertia])


def velocity_derivative(v_cog, a_cog):
    vx, vy, r = v_cog
    ax, ay, al = a_cog
    return np.array([vy * r + ax, -vx * r + ay, al])


def pose_derivative(pose, v_cog):
    psi = pose[2] if not isinstance(pose, Pose) else pose.psi
    vx, vy, r = v_cog
    c, s = math.cos(psi), math.sin(psi)
    return np.array([c * vx - s * vy, s * vx + c * vy, r])


def state_derivative(state, accel_fn):
    """Right-hand side of the stacked pose/velocity ODE.

    ``accel_fn(state)`` returns the body acceleration (a_x, a_y, psi_ddot).
    """
    state = np.asarray(state, dtype=float)
    v = state[3:6]
    return np.concatenate([pose_derivative(state[:3], v), velocity_derivative(v, accel_fn(state))])


def integrate_rk4(state, accel_fn, dt):
    """One classical RK4 step of the stacked state (x, y, psi, v_x, v_y, psi_dot)."""
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise ValueError("non-finite state")
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = state_derivative(state, accel_fn)
    k2 = state_derivative(state + 0.5 * dt * k1, accel_fn)
    k3 = state_derivative(state + 0.5 * dt * k2, accel_fn)
    k4 = state_derivative(state + dt * k3, accel_fn)
    return state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def tire_accel_fn(command, geom, params):
    """Acceleration source for :func:`integrate_rk4` driven by actuator states."""
    tp = params.tire_array()

    def accel(state):
        return np.array(kernels.body_accel(state[3], state[4], state[5], command.delta, command.omega,
                                           geom.G, params.mass, params.yaw_inertia, params.normal_loads, tp))
    return accel


def plant_step(state, command, geom, params, dt):
    """Fast RK4 step of the tire-driven plant (same maths as integrate_rk4 + tire_accel_fn)."""
    return kernels.plant_rk4(np.asarray(state, dtype=float), command.delta, command.omega, geom.G,
                             params.mass, params.yaw_inertia, params.normal_loads, params.tire_array(), dt)
