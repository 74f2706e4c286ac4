"""Convex obstacle-free region around a seed, shrunk by the vehicle radius.

Obstacles are visited once in order of distance to the seed (ties broken by
x, then y).  Every obstacle that still touches the current region gets a
separating half-plane through its point nearest to the seed, with the normal
pointing from the seed towards the obstacle.  Boundary segments are handled
the same way as points, which keeps every cut a supporting line of its
obstacle, so the result is sound by construction.

The seed may be a short segment along the heading instead of a single point.
Cut normals then start at the nearest point of that segment, which lets the
region extend past obstacles beside the vehicle.  With zero length the
procedure is the plain point-seeded one.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class InfeasibleFreespace(RuntimeError):
    """The seed is too close to an obstacle or outside the boundaries."""


@dataclass
class ConvexPolytope:
    A: np.ndarray   # (k, 2) unit normals
    b: np.ndarray   # (k,)
    kinds: tuple = ()   # per half-plane: "box", "boundary" or "point"

    def __post_init__(self):
        self.A = np.asarray(self.A, float).reshape(-1, 2)
        self.b = np.asarray(self.b, float).reshape(-1)
        if not self.kinds:
            self.kinds = ("point",) * len(self.b)

    def __len__(self):
        return len(self.b)

    def margins(self, pts):
        """b - A p for each point (rows) and half-plane (columns)."""
        pts = np.asarray(pts, float).reshape(-1, 2)
        return self.b[None, :] - pts @ self.A.T

    def contains(self, pts, tol=0.0):
        return np.all(self.margins(pts) >= -tol, axis=1)

    def excludes(self, pts):
        """True per point when some half-plane strictly excludes it."""
        return np.any(self.margins(pts) < 0.0, axis=1)

    def shrink(self, r):
        return ConvexPolytope(self.A.copy(), self.b - r, self.kinds)

    def vertices(self, tol=1e-9):
        """Vertices in counter-clockwise order (bounded polytopes only)."""
        k = len(self.b)
        if k < 2:
            return np.zeros((0, 2))
        i, j = np.triu_indices(k, 1)
        a1, a2 = self.A[i], self.A[j]
        det = a1[:, 0] * a2[:, 1] - a1[:, 1] * a2[:, 0]
        ok = np.abs(det) >= 1e-12
        i, j, a1, a2, det = i[ok], j[ok], a1[ok], a2[ok], det[ok]
        b1, b2 = self.b[i], self.b[j]
        # Cramer's rule for every pair of boundary lines at once
        pts = np.column_stack([(b1 * a2[:, 1] - b2 * a1[:, 1]) / det, (a1[:, 0] * b2 - a2[:, 0] * b1) / det])
        pts = pts[np.all(pts @ self.A.T <= self.b + tol, axis=1)]
        if not pts.shape[0]:
            return np.zeros((0, 2))
        pts = np.unique(np.round(pts, 12), axis=0)
        c = pts.mean(axis=0)
        ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
        return pts[np.argsort(ang)]

    def to_list(self):
        return [[float(a[0]), float(a[1]), float(bb)] for a, bb in zip(self.A, self.b)]

    def transformed(self, pose):
        """The same region expressed after mapping points through the SE(2) pose."""
        c, s = math.cos(pose[2]), math.sin(pose[2])
        rot = np.array([[c, -s], [s, c]])
        a_new = self.A @ rot.T
        b_new = self.b + a_new @ np.asarray(pose[:2], float)
        return ConvexPolytope(a_new, b_new, self.kinds)


def _closest_on_segment(p0, p1, pts):
    d = p1 - p0
    dd = float(d @ d)
    if dd == 0.0:
        return np.broadcast_to(p0, pts.shape).copy()
    t = np.clip(((pts - p0) @ d) / dd, 0.0, 1.0)
    return p0 + t[:, None] * d


def _segment_pair(a0, a1, b0, b1, samples=64):
    """Closest points (on a, on b) between two segments."""
    # exact for non-intersecting segments: the minimum involves an endpoint
    cand = []
    for p in (a0, a1):
        q = _closest_on_segment(b0, b1, p[None, :])[0]
        cand.append((float(np.hypot(*(p - q))), tuple(p), tuple(q)))
    for q in (b0, b1):
        p = _closest_on_segment(a0, a1, q[None, :])[0]
        cand.append((float(np.hypot(*(p - q))), tuple(p), tuple(q)))
    # proper intersection gives distance zero
    da = a1 - a0
    db = b1 - b0
    den = da[0] * db[1] - da[1] * db[0]
    if abs(den) > 1e-15:
        w = b0 - a0
        ta = (w[0] * db[1] - w[1] * db[0]) / den
        tb = (w[0] * da[1] - w[1] * da[0]) / den
        if 0.0 <= ta <= 1.0 and 0.0 <= tb <= 1.0:
            p = a0 + ta * da
            cand.append((0.0, tuple(p), tuple(p)))
    best = min(cand)
    return np.array(best[1]), np.array(best[2]), best[0]


def _clip_segment(A, b, q0, q1, tol=0.0):
    """Does the segment q0-q1 meet {A p <= b + tol}?"""
    t0, t1 = 0.0, 1.0
    d = q1 - q0
    for a, bb in zip(A, b):
        num = bb + tol - a @ q0
        den = a @ d
        if abs(den) < 1e-15:
            if num < 0:
                return False
            continue
        t = num / den
        if den > 0:
            t1 = min(t1, t)
        else:
            t0 = max(t0, t)
        if t0 > t1:
            return False
    return True


def seed_segment(seed, length, cloud, segments, clearance):
    """Seed segment along the heading, shortened to keep ``clearance`` to obstacles."""
    p0 = np.array(seed[:2], float)
    if length <= 0:
        return p0, p0.copy()
    d = np.array([math.cos(seed[2]), math.sin(seed[2])])
    t_max = float(length)
    if cloud.shape[0]:
        w = cloud - p0
        proj = w @ d
        perp2 = np.einsum("ij,ij->i", w, w) - proj ** 2
        hit = perp2 < clearance ** 2
        if np.any(hit):
            t_hit = proj[hit] - np.sqrt(clearance ** 2 - perp2[hit])
            t_hit = t_hit[proj[hit] > -clearance]
            if t_hit.size:
                t_max = min(t_max, max(float(t_hit.min()), 0.0))
    for seg in segments:
        q0, q1 = np.asarray(seg[:2], float), np.asarray(seg[2:], float)
        ts = np.linspace(0.0, t_max, 41)
        pts = p0 + ts[:, None] * d
        dist = np.hypot(*(pts - _closest_on_segment(q0, q1, pts)).T)
        bad = np.nonzero(dist <= clearance)[0]
        if bad.size:
            t_max = float(ts[bad[0] - 1]) if bad[0] > 0 else 0.0
    return p0, p0 + t_max * d


def extract_polytope(cloud, seed, boundaries=(), r_veh=0.7, seed_length=0.0, max_planes=24,
                     box=50.0, clearance_margin=0.05):
    """Convex region containing the seed and no obstacle, shrunk by ``r_veh``.

    cloud: (n, 2) obstacle points.  seed: (x, y, psi).  boundaries: segments
    (x0, y0, x1, y1).  Raises :class:`InfeasibleFreespace` if the seed point
    lies within ``r_veh`` of any obstacle.
    """
    cloud = np.asarray(cloud, float).reshape(-1, 2)
    segs = [np.asarray(s, float).reshape(4) for s in boundaries]
    seed = np.asarray(seed, float)
    p_seed = seed[:2]
    if cloud.shape[0]:
        dmin = float(np.min(np.hypot(*(cloud - p_seed).T)))
        if dmin <= r_veh:
            raise InfeasibleFreespace(f"seed within {dmin:.3f} m of an obstacle point (r_veh = {r_veh})")
    for s in segs:
        q = _closest_on_segment(s[:2], s[2:], p_seed[None, :])[0]
        if math.hypot(*(q - p_seed)) <= r_veh:
            raise InfeasibleFreespace("seed within r_veh of a boundary segment")
    s0, s1 = seed_segment(seed, seed_length, cloud, segs, r_veh + clearance_margin)

    A = [np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.0, -1.0])]
    b = [p_seed[0] + box, -(p_seed[0] - box), p_seed[1] + box, -(p_seed[1] - box)]
    kinds = ["box"] * 4

    # ordered obstacle list: (distance, x, y, kind, index)
    items = []
    if cloud.shape[0]:
        near = _closest_on_segment(s0, s1, cloud)
        dist = np.hypot(*(cloud - near).T)
        for i in range(cloud.shape[0]):
            items.append((float(dist[i]), float(cloud[i, 0]), float(cloud[i, 1]), 0, i))
    seg_near = []
    for j, s in enumerate(segs):
        on_seed, on_obs, dist = _segment_pair(s0, s1, s[:2], s[2:])
        seg_near.append((on_seed, on_obs))
        items.append((dist, float(on_obs[0]), float(on_obs[1]), 1, j))
    items.sort()

    Am = np.array(A)
    bm = np.array(b)
    for dist, _, _, kind, idx in items:
        if kind == 0:
            p = cloud[idx]
            if np.any(Am @ p > bm):
                continue
            s = near[idx]
        else:
            sg = segs[idx]
            if not _clip_segment(Am, bm, sg[:2], sg[2:]):
                continue
            s, p = seg_near[idx]
        if dist <= 1e-12:
            raise InfeasibleFreespace("seed segment touches an obstacle")
        n = (p - s) / dist
        Am = np.vstack([Am, n])
        bm = np.append(bm, n @ p)
        kinds.append("point" if kind == 0 else "boundary")

    poly = ConvexPolytope(Am, bm, tuple(kinds))
    poly = _limit_planes(poly, cloud, p_seed, max_planes, r_veh)
    return poly.shrink(r_veh)


def _subset(poly, keep):
    return ConvexPolytope(poly.A[keep], poly.b[keep], tuple(k for k, m in zip(poly.kinds, keep) if m))


def _limit_planes(poly, cloud, p_seed, max_planes, r_veh):
    if len(poly) <= max_planes:
        return poly
    # planes that touch no vertex are implied by the others
    v = poly.vertices()
    if v.shape[0] >= 3:
        active = np.any(np.abs(poly.b[None, :] - v @ poly.A.T) <= 1e-9, axis=0)
        poly = _subset(poly, active | (np.array(poly.kinds) == "boundary"))
    if len(poly) <= max_planes:
        return poly
    # keep boundary planes and the cuts most binding at the seed
    slack = poly.b - poly.A @ p_seed
    kinds = np.array(poly.kinds)
    order = np.argsort(slack, kind="stable")
    keep = kinds == "boundary"
    for i in order:
        if keep.sum() >= max_planes:
            break
        keep[i] = True
    capped = _subset(poly, keep)
    # points no longer cut get the kept plane best aligned with them, moved onto the point
    b = capped.b.copy()
    movable = np.array(capped.kinds) != "boundary"
    if cloud.shape[0] and np.any(movable):
        idx = np.nonzero(movable)[0]
        dist = np.hypot(*(cloud - p_seed).T)
        for n in np.lexsort((cloud[:, 1], cloud[:, 0], dist)):
            p = cloud[n]
            if np.any(b - capped.A @ p <= 1e-12):
                continue
            proj = capped.A[idx] @ (p - p_seed)
            j = idx[int(np.argmax(proj))]
            b[j] = capped.A[j] @ p
    out = ConvexPolytope(capped.A, b, capped.kinds)
    if np.min(out.b - out.A @ p_seed) <= r_veh:
        log.warning("cannot cap the polytope at %d planes without losing the seed; keeping %d",
                    max_planes, len(poly))
        return poly
    return out
