import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from overact.freespace import ConvexPolytope, InfeasibleFreespace, extract_polytope, seed_segment

SQUARE = [(0, 0, 10, 0), (10, 0, 10, 10), (10, 10, 0, 10), (0, 10, 0, 0)]


def test_empty_cloud_gives_inset_boundary():
    poly = extract_polytope(np.zeros((0, 2)), (5.0, 5.0, 0.0), SQUARE, r_veh=0.5)
    v = poly.vertices()
    np.testing.assert_allclose(v.min(axis=0), [0.5, 0.5], atol=1e-9)
    np.testing.assert_allclose(v.max(axis=0), [9.5, 9.5], atol=1e-9)
    assert v.shape[0] == 4


@given(st.floats(1.0, 4.0), st.floats(-math.pi, math.pi), st.floats(0.1, 0.9))
def test_single_point_cut(d, ang, r):
    seed = np.array([0.0, 0.0, 0.3])
    p = d * np.array([math.cos(ang), math.sin(ang)])
    poly = extract_polytope(p[None, :], seed, (), r_veh=r)
    n = p / d
    # a half-plane with normal along the point direction at distance d - r from the seed
    hits = [i for i in range(len(poly)) if poly.kinds[i] == "point"]
    assert len(hits) == 1
    np.testing.assert_allclose(poly.A[hits[0]], n, atol=1e-12)
    assert poly.b[hits[0]] - poly.A[hits[0]] @ seed[:2] == pytest.approx(d - r, abs=1e-12)
    assert poly.excludes(p[None, :])[0]


def _scene(seed):
    rng = np.random.default_rng(seed)
    cloud = rng.uniform(0, 10, size=(rng.integers(1, 60), 2))
    s = rng.uniform(2, 8, 2)
    keep = np.hypot(*(cloud - s).T) > 1.0
    return cloud[keep], np.array([s[0], s[1], rng.uniform(-math.pi, math.pi)])


@given(st.integers(0, 10_000), st.floats(0.2, 0.6), st.sampled_from([0.0, 0.5, 1.5]))
def test_random_scenes_sound(seed, r, seed_len):
    cloud, s = _scene(seed)
    poly = extract_polytope(cloud, s, SQUARE, r_veh=r, seed_length=seed_len)
    norms = np.linalg.norm(poly.A, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    # every obstacle point strictly outside, the seed strictly inside
    if cloud.shape[0]:
        assert np.all(poly.excludes(cloud))
    assert np.all(poly.margins(s[:2]) > 0)
    # inside the user boundaries
    v = poly.vertices()
    assert v.shape[0] >= 3
    assert np.all(v >= -1e-9) and np.all(v <= 10 + 1e-9)
    # the shrunk region keeps r away from every point: brute-force on a grid inside it
    g = np.stack(np.meshgrid(np.linspace(0, 10, 41), np.linspace(0, 10, 41)), -1).reshape(-1, 2)
    inside = g[poly.contains(g)]
    if cloud.shape[0] and inside.shape[0]:
        dmin = np.min(np.hypot(inside[:, None, 0] - cloud[None, :, 0], inside[:, None, 1] - cloud[None, :, 1]))
        assert dmin >= r - 1e-9


def test_vertices_convex():
    cloud, s = _scene(42)
    v = extract_polytope(cloud, s, SQUARE, r_veh=0.3).vertices()
    e = np.roll(v, -1, axis=0) - v
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    assert np.all(cross > -1e-12)


def test_infeasible_seed():
    with pytest.raises(InfeasibleFreespace):
        extract_polytope(np.array([[0.3, 0.0]]), (0.0, 0.0, 0.0), (), r_veh=0.5)
    with pytest.raises(InfeasibleFreespace):
        extract_polytope(np.zeros((0, 2)), (0.2, 5.0, 0.0), SQUARE, r_veh=0.5)


def test_plane_cap():
    ang = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    cloud = np.column_stack([3 * np.cos(ang), 3 * np.sin(ang)])
    poly = extract_polytope(cloud, (0.0, 0.0, 0.0), (), r_veh=0.5, max_planes=24)
    assert len(poly) <= 24
    assert np.all(poly.excludes(cloud))


def test_deterministic():
    cloud, s = _scene(7)
    a = extract_polytope(cloud, s, SQUARE, r_veh=0.4, seed_length=1.5)
    b = extract_polytope(cloud.copy(), s.copy(), SQUARE, r_veh=0.4, seed_length=1.5)
    assert a.to_list() == b.to_list()


def test_shrink_and_transform():
    sq = ConvexPolytope([[1, 0], [-1, 0], [0, 1], [0, -1]], [1, 1, 1, 1])
    np.testing.assert_allclose(sq.shrink(0.25).b, 0.75)
    pose = np.array([2.0, -1.0, 0.7])
    t = sq.transformed(pose)
    c, s = math.cos(0.7), math.sin(0.7)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 2, (200, 2))
    mapped = pts @ np.array([[c, -s], [s, c]]).T + pose[:2]
    np.testing.assert_array_equal(sq.contains(pts), t.contains(mapped))


def test_seed_segment_stops_short_of_obstacles():
    cloud = np.array([[2.0, 0.0]])
    p0, p1 = seed_segment((0.0, 0.0, 0.0), 3.0, cloud, [], 0.5)
    np.testing.assert_allclose(p1, [1.5, 0.0])
    p0, p1 = seed_segment((0.0, 0.0, 0.0), 1.0, cloud, [], 0.5)
    np.testing.assert_allclose(p1, [1.0, 0.0])


@given(st.integers(0, 10_000), st.integers(6, 12))
def test_tight_cap_stays_sound(seed, cap):
    rng = np.random.default_rng(seed)
    cloud = rng.uniform(-6, 6, size=(150, 2))
    cloud = cloud[np.hypot(*cloud.T) > 1.5]
    poly = extract_polytope(cloud, (0.0, 0.0, 0.0), (), r_veh=0.5, max_planes=cap)
    assert np.all(poly.excludes(cloud))
    assert np.all(poly.margins(np.zeros(2)) > 0)
