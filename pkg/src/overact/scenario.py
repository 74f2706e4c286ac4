"""Declarative scenario files: schema, loading, path interpolation and validation."""
import copy
import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .control import ControllerConfig
from .dynamics import ChassisGeometry, VehicleParams
from .localization import EkfNoise
from .planner import PlannerConfig, ReferencePath
from .simulation import ActuatorModel, SensorSuite, SimConfig

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec2 = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_vec3 = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}
_vec4 = {"type": "array", "items": _num, "minItems": 4, "maxItems": 4}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "overact scenario",
    "type": "object",
    "required": ["version", "vehicle", "path", "duration"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "duration": {"type": "number", "minimum": 0},
        "vehicle": {
            "type": "object",
            "required": ["mass"],
            "additionalProperties": False,
            "properties": {
                "mass": _pos, "yaw_inertia": _pos, "tire_radius": _pos, "enclosing_radius": _pos,
                "length": _pos, "B": _pos, "C": _pos, "D": _pos, "mu": _pos,
                "normal_loads": {"type": "array", "items": _pos, "minItems": 4, "maxItems": 4},
                "eps_v": _pos, "eps_inv": _pos,
            },
        },
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"s": _vec4, "l": _vec4},
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": _pos, "watchdog_timeout": _pos, "stop_decel": _pos,
                "actuators": {"type": "object"},
                "sensors": {"type": "object"},
            },
        },
        "localization": {"type": "object"},
        "planner": {"type": "object"},
        "controller": {"type": "object"},
        "path": {
            "type": "object",
            "required": ["waypoints", "velocities"],
            "additionalProperties": False,
            "properties": {
                "waypoints": {"type": "array", "items": _vec2, "minItems": 2},
                "velocities": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "closed": {"type": "boolean"},
                "spacing": _pos,
            },
        },
        "start": _vec3,
        "boundaries": {"type": "array", "items": _vec4},
        "obstacles": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "points": {"type": "array", "items": _vec2},
                "polygons": {"type": "array", "items": {"type": "array", "items": _vec2, "minItems": 3}},
                "spacing": _pos,
            },
        },
        "faults": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "command_dropout": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "mpc_budget": _pos,
                "mpc_jitter": _pos,
            },
        },
    },
}


class ScenarioError(ValueError):
    """Scenario file failed schema or invariant checks; ``problems`` lists each finding."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# path interpolation
# ---------------------------------------------------------------------------


def _catmull_rom_segment(p0, p1, p2, p3, u, alpha=0.5):
    """Centripetal Catmull-Rom between p1 and p2 for parameters u in [0, 1]."""
    def knot(ti, a, b):
        return ti + max(float(np.linalg.norm(b - a)), 1e-12) ** alpha
    t0 = 0.0
    t1 = knot(t0, p0, p1)
    t2 = knot(t1, p1, p2)
    t3 = knot(t2, p2, p3)
    t = (t1 + u * (t2 - t1))[:, None]
    a1 = (t1 - t) / (t1 - t0) * p0 + (t - t0) / (t1 - t0) * p1
    a2 = (t2 - t) / (t2 - t1) * p1 + (t - t1) / (t2 - t1) * p2
    a3 = (t3 - t) / (t3 - t2) * p2 + (t - t2) / (t3 - t2) * p3
    b1 = (t2 - t) / (t2 - t0) * a1 + (t - t0) / (t2 - t0) * a2
    b2 = (t3 - t) / (t3 - t1) * a2 + (t - t1) / (t3 - t1) * a3
    return (t2 - t) / (t2 - t1) * b1 + (t - t1) / (t2 - t1) * b2


def spline_points(waypoints, closed=False, per_segment=400):
    """Dense Catmull-Rom curve through the waypoints; returns (points, segment index per point)."""
    w = np.asarray(waypoints, float)
    if closed:
        ctrl = np.vstack([w[-1], w, w[0], w[1]])
        nseg = len(w)
    else:
        ctrl = np.vstack([2 * w[0] - w[1], w, 2 * w[-1] - w[-2]])
        nseg = len(w) - 1
    pts = []
    seg = []
    u = np.linspace(0.0, 1.0, per_segment, endpoint=False)
    for i in range(nseg):
        pts.append(_catmull_rom_segment(ctrl[i], ctrl[i + 1], ctrl[i + 2], ctrl[i + 3], u))
        seg.append(np.full(per_segment, i))
    pts.append(w[0:1] if closed else w[-1:])
    seg.append(np.array([nseg - 1]))
    return np.vstack(pts), np.concatenate(seg)


def interpolate_path(waypoints, velocities, spacing=0.05, closed=False):
    """Smooth path through the waypoints sampled at uniform arc length.

    ``velocities`` holds one target speed per segment (or a single value);
    speeds are linear between segment midpoints.
    """
    w = np.asarray(waypoints, float).reshape(-1, 2)
    if len(w) < 2:
        raise ValueError("need at least two waypoints")
    gaps = np.hypot(*np.diff(w, axis=0).T)
    if np.any(gaps < 1e-9) or (closed and np.hypot(*(w[0] - w[-1])) < 1e-9):
        raise ValueError("duplicate consecutive waypoints")
    nseg = len(w) if closed else len(w) - 1
    vel = np.asarray(velocities, float).reshape(-1)
    if vel.size == 1:
        vel = np.full(nseg, vel[0])
    if vel.size != nseg:
        raise ValueError(f"expected {nseg} segment velocities, got {vel.size}")
    dense, seg = spline_points(w, closed)
    ds = np.hypot(*np.diff(dense, axis=0).T)
    s_dense = np.concatenate([[0.0], np.cumsum(ds)])
    length = s_dense[-1]
    n = max(1, int(round(length / spacing)))
    s = np.linspace(0.0, length, n + 1)
    x = np.interp(s, s_dense, dense[:, 0])
    y = np.interp(s, s_dense, dense[:, 1])
    tang = np.gradient(dense, s_dense, axis=0)
    heading = np.unwrap(np.arctan2(tang[:, 1], tang[:, 0]))
    psi = np.interp(s, s_dense, heading)
    # segment midpoints in arc length carry the target speeds
    mids = np.array([0.5 * (s_dense[seg == i][0] + (s_dense[seg == i + 1][0] if i + 1 < nseg else length))
                     for i in range(nseg)])
    v = np.interp(s, mids, vel)
    return ReferencePath(x=x, y=y, psi=psi, v=v, s=s)


def polygon_points(poly, spacing=0.05):
    """Points along a closed polygon outline at roughly uniform spacing."""
    p = np.asarray(poly, float)
    out = []
    for a, b in zip(p, np.roll(p, -1, axis=0)):
        k = max(1, int(math.ceil(np.hypot(*(b - a)) / spacing)))
        t = np.arange(k)[:, None] / k
        out.append(a + t * (b - a))
    return np.vstack(out)


# ---------------------------------------------------------------------------
# scenario object
# ---------------------------------------------------------------------------


def _build(cls, data, name):
    known = {f.name for f in fields(cls) if f.init}
    extra = set(data) - known
    if extra:
        raise ScenarioError([f"{name}: unknown field(s) {sorted(extra)}"])
    kw = {}
    for k, v in data.items():
        kw[k] = tuple(v) if isinstance(v, list) and k not in ("fix_offsets",) else v
    return cls(**kw)


@dataclass
class Scenario:
    name: str
    params: VehicleParams
    geom: ChassisGeometry
    sim: SimConfig
    planner: PlannerConfig
    controller: ControllerConfig
    ekf: EkfNoise
    path: ReferencePath
    waypoints: np.ndarray
    start: np.ndarray
    boundaries: list
    obstacles: np.ndarray
    seed: int = 0
    duration: float = 60.0
    faults: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data):
        problems = sorted(schema_errors(data))
        if problems:
            raise ScenarioError(problems)
        d = copy.deepcopy(data)
        try:
            params = _build(VehicleParams, d["vehicle"], "vehicle")
            g = d.get("geometry", {})
            geom = ChassisGeometry(**{k: tuple(v) for k, v in g.items()})
            simd = d.get("simulation", {})
            act = _build(ActuatorModel, simd.get("actuators", {}), "simulation.actuators")
            sens = _build(SensorSuite, simd.get("sensors", {}), "simulation.sensors")
            sim = SimConfig(actuators=act, sensors=sens,
                            **{k: v for k, v in simd.items() if k not in ("actuators", "sensors")})
            sim.validate()
            planner = _build(PlannerConfig, d.get("planner", {}), "planner")
            planner.validate()
            controller = _build(ControllerConfig, d.get("controller", {}), "controller")
            controller.validate()
            ekf = _build(EkfNoise, d.get("localization", {}), "localization")
            pd = d["path"]
            path = interpolate_path(pd["waypoints"], pd["velocities"], pd.get("spacing", 0.05),
                                    pd.get("closed", False))
        except ScenarioError:
            raise
        except (TypeError, ValueError) as exc:
            raise ScenarioError([str(exc)]) from exc
        start = np.asarray(d.get("start", [path.x[0], path.y[0], path.psi[0]]), float)
        obs = d.get("obstacles", {})
        spacing = obs.get("spacing", 0.05)
        pts = [np.asarray(obs.get("points", []), float).reshape(-1, 2)]
        for poly in obs.get("polygons", []):
            pts.append(polygon_points(poly, spacing))
        return cls(name=d.get("name", "scenario"), params=params, geom=geom, sim=sim, planner=planner,
                   controller=controller, ekf=ekf, path=path, waypoints=np.asarray(pd["waypoints"], float),
                   start=start, boundaries=[np.asarray(b, float) for b in d.get("boundaries", [])],
                   obstacles=np.vstack(pts), seed=int(d.get("seed", 0)), duration=float(d["duration"]),
                   faults=d.get("faults", {}), raw=data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def schema_errors(data):
    validator = jsonschema.Draft7Validator(SCHEMA)
    out = []
    for err in validator.iter_errors(data):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        out.append(f"{where}: {err.message}")
    return out


def bundled(name):
    """Path of a bundled scenario file (``reproduction``, ``obstacle``, ``corrections``)."""
    return Path(str(resources.files("overact") / "scenarios" / f"{name}.json"))


def bundled_names():
    return sorted(p.stem for p in (resources.files("overact") / "scenarios").iterdir() if p.name.endswith(".json"))


def resolve(name_or_path):
    p = Path(name_or_path)
    if p.exists():
        return p
    b = bundled(str(name_or_path))
    if b.exists():
        return b
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name_or_path!r}")


def _seg_dist(p, seg):
    a, b = seg[:2], seg[2:]
    d = b - a
    t = min(max(float((p - a) @ d / (d @ d)), 0.0), 1.0)
    return float(np.hypot(*(a + t * d - p)))


def _inside_polygon(p, poly):
    """Even-odd ray casting."""
    q = np.asarray(poly, float)
    x0, y0 = q[:, 0], q[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    cross = (y0 > p[1]) != (y1 > p[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = x0 + (p[1] - y0) * (x1 - x0) / (y1 - y0)
    return bool(np.count_nonzero(cross & (p[0] < xi)) % 2)


def validate(path_or_dict):
    """Check a scenario and return a list of human-readable problems (empty when valid)."""
    if isinstance(path_or_dict, dict):
        data = path_or_dict
    else:
        try:
            with open(path_or_dict) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            return [f"cannot read scenario: {exc}"]
    try:
        sc = Scenario.from_dict(data)
    except ScenarioError as exc:
        return exc.problems
    problems = []
    r = sc.params.enclosing_radius
    if sc.obstacles.shape[0]:
        for i, wp in enumerate(sc.waypoints):
            d = np.hypot(*(sc.obstacles - wp).T)
            j = int(np.argmin(d))
            if d[j] <= r:
                problems.append(f"waypoint {i} at ({wp[0]:.2f}, {wp[1]:.2f}) lies within {r} m of an obstacle "
                                f"at ({sc.obstacles[j, 0]:.2f}, {sc.obstacles[j, 1]:.2f})")
        for j, poly in enumerate(sc.raw.get("obstacles", {}).get("polygons", [])):
            for i, wp in enumerate(sc.waypoints):
                if _inside_polygon(wp, poly):
                    problems.append(f"waypoint {i} at ({wp[0]:.2f}, {wp[1]:.2f}) lies inside obstacle polygon {j}")
            if _inside_polygon(sc.start[:2], poly):
                problems.append(f"start pose ({sc.start[0]:.2f}, {sc.start[1]:.2f}) lies inside obstacle polygon {j}")
        d0 = float(np.min(np.hypot(*(sc.obstacles - sc.start[:2]).T)))
        if d0 <= r:
            problems.append(f"start pose ({sc.start[0]:.2f}, {sc.start[1]:.2f}) is not collision free "
                            f"(clearance {d0:.3f} m <= {r} m)")
    for k, seg in enumerate(sc.boundaries):
        d = _seg_dist(sc.start[:2], seg)
        if d <= r:
            problems.append(f"start pose within {d:.3f} m of boundary segment {k}")
    if problems:
        return problems
    # dry run of one planning cycle from the start pose
    from .planner import Planner
    try:
        planner = Planner(sc.path, copy.deepcopy(sc.planner), sc.boundaries, r)
        pose = sc.start
        _, rec = planner.plan(0.0, np.array([0.0, 0.0, 0.0, 0.0, 0.0]), pose, _to_local(sc.obstacles, pose),
                              [_seg_to_local(b, pose) for b in sc.boundaries])
        if rec.status not in ("optimal",):
            problems.append(f"dry-run planning cycle did not solve (status {rec.status})")
    except Exception as exc:  # report, do not crash the validator
        problems.append(f"dry-run planning cycle failed: {exc}")
    return problems


def _to_local(pts, pose):
    c, s = math.cos(pose[2]), math.sin(pose[2])
    d = np.asarray(pts, float).reshape(-1, 2) - pose[:2]
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def _seg_to_local(seg, pose):
    a = _to_local(seg[:2], pose)[0]
    b = _to_local(seg[2:], pose)[0]
    return np.concatenate([a, b])
