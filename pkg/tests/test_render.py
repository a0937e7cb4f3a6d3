import numpy as np
import pytest

from advmesh.mesh import SphereSpec, icosphere
from advmesh.render import (Pose, RayPattern, RenderError, cast_rays, hdl64_pattern, hit_jacobian, intersect,
                            render, vertex_gradient)

TRI = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])


def brute_closest(origin, d, tris):
    best = None
    for f, tri in enumerate(tris):
        h = intersect(origin, d, tri, face_id=f)
        if h is not None and (best is None or h.t < best.t):
            best = h
    return best


def test_hdl64_full_and_rooftop():
    full = hdl64_pattern("full")
    assert len(full.elevations) == 64
    assert full.elevations[0] == 2.0 and full.elevations[-1] == pytest.approx(-24.8, abs=1e-12)
    assert np.allclose(np.diff(full.elevations), -26.8 / 63)
    roof = hdl64_pattern("rooftop")
    assert len(roof.elevations) == 10 and roof.elevations[0] == 2.0
    assert roof.elevations == full.elevations[:10]


def test_azimuth_count():
    p = hdl64_pattern(azimuth_start=-45, azimuth_end=45, azimuth_step=0.5)
    assert len(p.azimuths) == 181
    assert p.n_rays == 64 * 181
    d = p.directions()
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-15)


@pytest.mark.parametrize("bad", [dict(azimuth_step=0.0), dict(max_range=-1.0), dict(elevations=(1.0, 2.0))])
def test_pattern_guards(bad):
    kw = dict(elevations=(2.0, 1.0))
    kw.update(bad)
    with pytest.raises(ValueError):
        RayPattern(**kw)


def test_ray_index_recovers_ray_ids():
    p = hdl64_pattern(azimuth_start=-10, azimuth_end=10, azimuth_step=0.5)
    ranges = np.random.default_rng(0).uniform(2, 50, p.n_rays)
    pts = p.directions() * ranges[:, None]
    assert np.array_equal(p.ray_index(pts), np.arange(p.n_rays))
    behind = np.array([[-10.0, 0.0, 0.0]])
    assert p.ray_index(behind)[0] == -1


def test_intersect_examples():
    h = intersect((0, 0, 0), (0, 0, 1), TRI - [0.25, 0.25, 0])
    assert h is not None and h.t == pytest.approx(1.0, abs=1e-15)
    assert h.barycentric == pytest.approx((0.25, 0.25), abs=1e-15)
    assert np.allclose(h.point, (0, 0, 1))
    assert intersect((0, 0, 0), (0, 0, 1), TRI - [0.9, 0.9, 0]) is None
    assert intersect((0, 0, 0), (1, 0, 0), TRI) is None


def test_intersect_edges_backfaces_and_degenerate():
    # a ray through a vertex and through an edge both count
    assert intersect((0, 0, 0), (0, 0, 1), TRI) is not None
    assert intersect((0.5, 0, 0), (0, 0, 1), TRI) is not None
    back = intersect((0.2, 0.2, 2.0), (0, 0, -1), TRI)
    assert back is not None and back.t == pytest.approx(1.0)
    assert intersect((0, 0, 0), (0, 0, 1), [[0, 0, 1], [1, 0, 1], [2, 0, 1]]) is None
    assert intersect((0.2, 0.2, 2.0), (0, 0, 1), TRI) is None   # triangle behind the origin


def test_cast_rays_matches_brute_force():
    rng = np.random.default_rng(1)
    m = icosphere(SphereSpec(1, (0.7, 0.7, 0.5)))
    tris = (m.vertices + [5.0, 0.3, 0.1])[m.faces]
    origin = np.zeros(3)
    d = rng.normal([5.0, 0.3, 0.1], 0.4, (400, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, f, u, v = cast_rays(origin, d, tris)
    n_hit = 0
    for i in range(len(d)):
        h = brute_closest(origin, d[i], tris)
        if h is None:
            assert f[i] == -1
            continue
        n_hit += 1
        assert t[i] == pytest.approx(h.t, abs=1e-12)
        assert f[i] == h.face_id
        assert (u[i], v[i]) == pytest.approx((h.u, h.v), abs=1e-9)
    assert 50 < n_hit < 400


def test_render_hit_count_matches_brute_force():
    pat = hdl64_pattern("rooftop", azimuth_start=-5, azimuth_end=5, azimuth_step=0.2)
    m = icosphere(SphereSpec(2, (0.7, 0.7, 0.5)))
    pose = Pose((10.0, 0.0, 0.0), 0.3)
    res = render(np.zeros((0, 4)), m, pose, pat)
    world = pose.apply(m.vertices)
    dirs = pat.directions()
    expected = [i for i in range(pat.n_rays) if brute_closest(np.zeros(3), dirs[i], world[m.faces]) is not None]
    assert len(res.hits) == len(expected) > 0
    assert [h.ray_id for h in res.hits] == expected
    for h in res.hits:
        ref = brute_closest(np.zeros(3), dirs[h.ray_id], world[m.faces])
        assert h.t == pytest.approx(ref.t, abs=1e-12)
        assert np.allclose(h.point, np.asarray(ref.point), atol=1e-9)
        u, v = h.barycentric
        assert u >= 0 and v >= 0 and u + v <= 1
    assert np.all(res.cloud[:, 3] == 0)


def test_render_mesh_behind_sensor_and_empty_pattern():
    rng = np.random.default_rng(2)
    base = np.column_stack([rng.uniform(5, 30, (50, 3)), np.zeros(50)])
    m = icosphere(SphereSpec(2, (0.7, 0.7, 0.5)))
    res = render(base, m, Pose((-10.0, 0.0, 0.0)), hdl64_pattern())
    assert len(res.hits) == 0 and np.array_equal(res.cloud, base)
    empty = RayPattern(elevations=())
    res = render(base, m, Pose((10.0, 0.0, 0.0)), empty)
    assert len(res.hits) == 0 and np.array_equal(res.cloud, base)


def test_occlusion_replaces_points_on_hit_rays_only():
    pat = hdl64_pattern("rooftop", azimuth_start=-5, azimuth_end=5, azimuth_step=0.2)
    m = icosphere(SphereSpec(2, (0.7, 0.7, 0.5)))
    res0 = render(np.zeros((0, 4)), m, Pose((10.0, 0.0, 0.0)), pat)
    hit_ray = res0.hits[len(res0.hits) // 2].ray_id
    dirs = pat.directions()
    free = [i for i in range(pat.n_rays) if i not in set(res0.ray_ids.tolist())][:3]
    behind = np.r_[12.0 * dirs[hit_ray], 0.0]
    front = np.r_[5.0 * dirs[hit_ray], 0.0]
    others = np.column_stack([12.0 * dirs[free], np.zeros(len(free))])
    base = np.vstack([behind, front, others])
    res = render(base, m, Pose((10.0, 0.0, 0.0)), pat)
    assert res.keep.tolist() == [False, True] + [True] * len(free)
    assert len(res.hits) == len(res0.hits)
    assert np.array_equal(res.cloud[:res.n_base_kept], base[res.keep])
    assert np.array_equal(res.cloud[res.hit_slice], res0.cloud)


def test_render_is_deterministic():
    pat = hdl64_pattern(azimuth_start=-20, azimuth_end=20, azimuth_step=0.4)
    m = icosphere(SphereSpec(2, (0.7, 0.7, 0.5)))
    poses = [Pose((9.0, -2.0, -0.5), 0.4), Pose((14.0, 3.0, -0.2), -1.0)]
    rng = np.random.default_rng(3)
    base = np.column_stack([rng.uniform(3, 30, (200, 3)), np.zeros(200)])
    a = render(base, m, poses, pat)
    b = render(base.copy(), m, poses, pat)
    assert a.cloud.tobytes() == b.cloud.tobytes()
    assert np.array_equal(a.face_ids, b.face_ids)


def _random_hit(rng):
    while True:
        tri = rng.normal(0, 1, (3, 3)) + [0, 0, 5]
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        if np.linalg.norm(n) < 0.3:
            continue
        u, v = rng.uniform(0.05, 0.9, 2)
        if u + v > 0.95:
            continue
        p = (1 - u - v) * tri[0] + u * tri[1] + v * tri[2]
        o = rng.normal(0, 1, 3)
        d = (p - o) / np.linalg.norm(p - o)
        if abs(np.dot(n / np.linalg.norm(n), d)) < 0.2:
            continue
        hit = intersect(o, d, tri)
        if hit is not None:
            return o, d, tri, hit


def test_hit_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    h = 1e-6
    worst = 0.0
    for _ in range(1000):
        o, d, tri, hit = _random_hit(rng)
        jac = hit_jacobian(hit, tri, d)
        fd = np.zeros((3, 9))
        for k in range(9):
            tp, tm = tri.copy(), tri.copy()
            tp[k // 3, k % 3] += h
            tm[k // 3, k % 3] -= h
            hp, hm = intersect(o, d, tp), intersect(o, d, tm)
            fd[:, k] = (np.asarray(hp.point) - np.asarray(hm.point)) / (2 * h)
        worst = max(worst, np.linalg.norm(jac - fd) / np.linalg.norm(jac))
    assert worst <= 1e-5


def test_hit_jacobian_rigid_translation_and_in_plane_invariance():
    rng = np.random.default_rng(5)
    for _ in range(50):
        o, d, tri, hit = _random_hit(rng)
        jac = hit_jacobian(hit, tri, d)
        delta = rng.uniform(-1, 1)
        assert np.allclose(jac @ np.tile(delta * d, 3), delta * d, atol=1e-9)
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        w = rng.normal(size=3)
        w -= np.dot(w, n) / np.dot(n, n) * n          # keeps the plane fixed
        for k in range(3):
            dv = np.zeros(9)
            dv[3 * k:3 * k + 3] = w
            assert np.allclose(jac @ dv, 0.0, atol=1e-12)


def test_hit_jacobian_degenerate_raises():
    o, d = np.zeros(3), np.array([0.0, 0.0, 1.0])
    hit = intersect(o, d, TRI - [0.25, 0.25, 0])
    flat = np.array([[0, 0, 1], [1, 0, 1], [2, 0, 1]], dtype=float)
    with pytest.raises(RenderError):
        hit_jacobian(hit, flat, d)


def test_vertex_gradient_equals_summed_jacobians():
    pat = hdl64_pattern("rooftop", azimuth_start=-6, azimuth_end=6, azimuth_step=0.3)
    m = icosphere(SphereSpec(1, (0.7, 0.7, 0.5)))
    res = render(np.zeros((0, 4)), m, Pose((8.0, 0.2, 0.0), 0.7), pat)
    rng = np.random.default_rng(6)
    g = rng.normal(size=(len(res.hits), 3))
    out = vertex_gradient(res, g)
    ref = np.zeros_like(res.world_vertices)
    for i, (hit, gi) in enumerate(zip(res.hits, g)):
        f = res.faces[hit.face_id]
        contrib = hit_jacobian(hit, res.world_vertices[f], res.directions[i]).T @ gi
        for k in range(3):
            ref[f[k]] += contrib[3 * k:3 * k + 3]
    assert np.allclose(out, ref, atol=1e-10)


def test_frozen_hit_points_reproduce_render():
    pat = hdl64_pattern("rooftop", azimuth_start=-6, azimuth_end=6, azimuth_step=0.3)
    m = icosphere(SphereSpec(1, (0.7, 0.7, 0.5)))
    res = render(np.zeros((0, 4)), m, Pose((8.0, 0.2, 0.0), 0.7), pat)
    assert np.allclose(res.hit_points(), res.cloud[res.hit_slice, :3], atol=1e-12)
    assert len(res.hits) == len(res.cloud)
