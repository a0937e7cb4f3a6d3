"""Simulated LiDAR: ray patterns, Moller-Trumbore ray casting, merging mesh
returns into a point cloud and the analytic hit-point Jacobian used to
backpropagate detector gradients onto mesh vertices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RAY_EPS = 1e-8
DET_EPS = 1e-12

HDL64_TOP_DEG = 2.0
HDL64_BOTTOM_DEG = -24.8


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RayPattern:
    """Spinning-LiDAR scan: elevation lines times an azimuth sweep (degrees)."""

    elevations: tuple[float, ...]
    azimuth_start: float = -60.0
    azimuth_end: float = 60.0
    azimuth_step: float = 0.2
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_range: float = 80.0

    def __post_init__(self):
        el = tuple(float(e) for e in self.elevations)
        object.__setattr__(self, "elevations", el)
        object.__setattr__(self, "sensor_origin", tuple(float(v) for v in self.sensor_origin))
        if self.azimuth_step <= 0:
            raise ValueError("azimuth_step must be positive")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if any(b >= a for a, b in zip(el, el[1:])):
            raise ValueError("elevations must be strictly decreasing")

    @property
    def azimuths(self) -> np.ndarray:
        n = int(math.floor((self.azimuth_end - self.azimuth_start) / self.azimuth_step + 1e-9)) + 1
        return self.azimuth_start + self.azimuth_step * np.arange(max(n, 0))

    @property
    def n_rays(self) -> int:
        return len(self.elevations) * len(self.azimuths)

    def directions(self) -> np.ndarray:
        """(n_rays, 3) unit directions; ray id = line * n_azimuth + azimuth index."""
        el = np.radians(np.asarray(self.elevations))[:, None]
        az = np.radians(self.azimuths)[None, :]
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)], axis=-1)
        return d.reshape(-1, 3)

    def ray_index(self, points: np.ndarray) -> np.ndarray:
        """Ray id whose direction is within half a step of each point, else -1."""
        if self.n_rays == 0 or len(points) == 0:
            return np.full(len(points), -1, dtype=np.int64)
        rel = np.asarray(points)[:, :3] - np.asarray(self.sensor_origin)
        az = np.degrees(np.arctan2(rel[:, 1], rel[:, 0]))
        el = np.degrees(np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1])))
        ai = np.rint((az - self.azimuth_start) / self.azimuth_step).astype(np.int64)
        ok = (ai >= 0) & (ai < len(self.azimuths))
        ok &= np.abs(az - (self.azimuth_start + ai * self.azimuth_step)) <= 0.5 * self.azimuth_step + 1e-9
        elev = np.asarray(self.elevations)
        li = np.argmin(np.abs(el[:, None] - elev[None, :]), axis=1)
        if len(elev) > 1:
            gaps = np.abs(np.diff(elev))
            half = 0.5 * np.minimum(np.r_[gaps[0], gaps], np.r_[gaps, gaps[-1]])
        else:
            half = np.array([0.5 * self.azimuth_step])
        ok &= np.abs(el - elev[li]) <= half[li] + 1e-9
        return np.where(ok, li * len(self.azimuths) + ai, -1)


def hdl64_elevations() -> np.ndarray:
    """64 uniformly spaced HDL-64E elevations from +2 to -24.8 degrees."""
    return np.linspace(HDL64_TOP_DEG, HDL64_BOTTOM_DEG, 64)


def hdl64_pattern(mode: str = "full", azimuth_start: float = -60.0, azimuth_end: float = 60.0,
                  azimuth_step: float = 0.2, sensor_origin=(0.0, 0.0, 0.0), max_range: float = 80.0,
                  n_lines: int = 10) -> RayPattern:
    """HDL-64E-like pattern; ``mode="rooftop"`` keeps only the top ``n_lines`` lines."""
    el = hdl64_elevations()
    if mode == "rooftop":
        el = el[:n_lines]
    elif mode != "full":
        raise ValueError(f"unknown pattern mode {mode!r}")
    return RayPattern(tuple(el), azimuth_start, azimuth_end, azimuth_step, tuple(sensor_origin), max_range)


# --------------------------------------------------------------------------
# ray/triangle intersection


@dataclass(frozen=True)
class HitRecord:
    ray_id: int
    face_id: int
    t: float
    u: float
    v: float
    point: tuple[float, float, float]

    @property
    def barycentric(self) -> tuple[float, float]:
        return self.u, self.v


def intersect(origin, direction, triangle, ray_id: int = 0, face_id: int = 0) -> HitRecord | None:
    """Moller-Trumbore intersection of one ray with one triangle.

    Boundaries are inclusive and back faces are not culled. Returns None
    for misses, parallel rays and degenerate triangles.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    v0, v1, v2 = np.asarray(triangle, dtype=float)
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(d, e2)
    det = float(np.dot(e1, p))
    if abs(det) < DET_EPS:
        return None
    inv = 1.0 / det
    s = o - v0
    u = float(np.dot(s, p)) * inv
    if u < 0.0 or u > 1.0:
        return None
    q = np.cross(s, e1)
    v = float(np.dot(d, q)) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = float(np.dot(e2, q)) * inv
    if t <= RAY_EPS:
        return None
    return HitRecord(ray_id, face_id, t, u, v, tuple(o + t * d))


def cast_rays(origin: np.ndarray, dirs: np.ndarray, tris: np.ndarray, max_range: float = np.inf,
              chunk: int = 4096):
    """Closest hit of each ray against all triangles (vectorized).

    Returns ``(t, face, u, v)`` arrays; ``face == -1`` where nothing is hit.
    Ties on ``t`` resolve to the lowest face index.
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    f_best = np.full(n, -1, dtype=np.int64)
    u_best = np.zeros(n)
    v_best = np.zeros(n)
    if n == 0 or len(tris) == 0:
        return t_best, f_best, u_best, v_best
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    s = origin[None, :] - v0                          # (F, 3)
    step = max(1, chunk // max(1, len(tris)) * 64)
    for a in range(0, n, step):
        d = dirs[a:a + step]                          # (R, 3)
        p = np.cross(d[:, None, :], e2[None, :, :])   # (R, F, 3)
        det = np.einsum("fk,rfk->rf", e1, p)
        ok = np.abs(det) >= DET_EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.einsum("fk,rfk->rf", s, p) * inv
        q = np.cross(s, e1)                           # (F, 3)
        v = np.einsum("rk,fk->rf", d, q) * inv
        t = np.einsum("fk,fk->f", e2, q)[None, :] * inv
        hit = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > RAY_EPS) & (t <= max_range)
        tt = np.where(hit, t, np.inf)
        j = np.argmin(tt, axis=1)
        rows = np.arange(len(d))
        tb = tt[rows, j]
        got = np.isfinite(tb)
        sl = slice(a, a + len(d))
        t_best[sl] = tb
        f_best[sl] = np.where(got, j, -1)
        u_best[sl] = np.where(got, u[rows, j], 0.0)
        v_best[sl] = np.where(got, v[rows, j], 0.0)
    return t_best, f_best, u_best, v_best


# --------------------------------------------------------------------------
# pose


@dataclass(frozen=True)
class Pose:
    """Rigid transform: yaw about +z, then translation."""

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation().T + np.asarray(self.translation)


# --------------------------------------------------------------------------
# rendering


@dataclass
class RenderResult:
    """Output of :func:`render`.

    ``cloud`` is the kept base points followed by one point per hit, in
    ``ray_id`` order. ``world_vertices`` stacks all placed mesh instances.
    """

    cloud: np.ndarray
    hits: list[HitRecord]
    keep: np.ndarray                 # mask over base points
    n_base_kept: int
    ray_ids: np.ndarray              # per hit
    face_ids: np.ndarray             # per hit, into the stacked instance faces
    directions: np.ndarray           # per hit
    origin: np.ndarray
    faces: np.ndarray                # stacked instance faces
    world_vertices: np.ndarray
    n_instances: int = 1
    n_vertices: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def hit_slice(self) -> slice:
        return slice(self.n_base_kept, self.n_base_kept + len(self.hits))

    def hit_points(self, world_vertices: np.ndarray | None = None) -> np.ndarray:
        """Hit points with ray/face assignment frozen, for given vertices."""
        if world_vertices is None:
            world_vertices = self.world_vertices
        if len(self.face_ids) == 0:
            return np.zeros((0, 3))
        tri = world_vertices[self.faces[self.face_ids]]
        v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        n = np.cross(e1, e2)
        t = np.einsum("ij,ij->i", n, v0 - self.origin) / np.einsum("ij,ij->i", n, self.directions)
        return self.origin + t[:, None] * self.directions

    def cloud_with(self, world_vertices: np.ndarray) -> np.ndarray:
        """Cloud re-rendered with frozen assignment (reflectivity column kept)."""
        out = self.cloud.copy()
        out[self.hit_slice, :3] = self.hit_points(world_vertices)
        return out


def place_instances(local_vertices: np.ndarray, faces: np.ndarray, poses) -> tuple[np.ndarray, np.ndarray]:
    """Stack copies of a local-frame mesh transformed by each pose."""
    verts, fs = [], []
    for k, pose in enumerate(poses):
        verts.append(pose.apply(local_vertices))
        fs.append(faces + k * len(local_vertices))
    return np.concatenate(verts), np.concatenate(fs)


def render(base_cloud: np.ndarray, mesh, pose, pattern: RayPattern) -> RenderResult:
    """Insert a mesh into a point cloud by ray casting.

    ``pose`` may be a single :class:`Pose` or a list (one mesh instance per
    pose). Base points on a ray that hits the mesh at a shorter range are
    removed; hit points are appended with reflectivity 0.
    """
    poses = [pose] if isinstance(pose, Pose) else list(pose)
    base = np.asarray(base_cloud, dtype=float).reshape(-1, 4) if np.size(base_cloud) else np.zeros((0, 4))
    origin = np.asarray(pattern.sensor_origin, dtype=float)
    if poses:
        world, faces = place_instances(mesh.vertices, mesh.faces, poses)
    else:
        world, faces = np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)

    dirs_all = pattern.directions()
    cand = _candidate_rays(dirs_all, origin, world, len(mesh.vertices), len(poses), pattern.max_range)
    tris = world[faces] if len(faces) else np.zeros((0, 3, 3))
    t, f, u, v = cast_rays(origin, dirs_all[cand], tris, pattern.max_range)
    got = f >= 0
    ray_ids = cand[got]
    order = np.argsort(ray_ids, kind="stable")
    ray_ids = ray_ids[order]
    t, f, u, v = t[got][order], f[got][order], u[got][order], v[got][order]
    dirs = dirs_all[ray_ids]
    pts = origin + t[:, None] * dirs

    keep = np.ones(len(base), dtype=bool)
    if len(ray_ids) and len(base):
        rid = pattern.ray_index(base)
        hit_t = np.full(pattern.n_rays, np.inf)
        hit_t[ray_ids] = t
        rng = np.linalg.norm(base[:, :3] - origin, axis=1)
        occluded = (rid >= 0) & (rng > hit_t[np.maximum(rid, 0)])
        keep &= ~occluded
    kept = base[keep]
    cloud = np.concatenate([kept, np.column_stack([pts, np.zeros(len(pts))])]) if len(pts) else kept.copy()
    hits = [HitRecord(int(r), int(ff), float(tt), float(uu), float(vv), tuple(p))
            for r, ff, tt, uu, vv, p in zip(ray_ids, f, t, u, v, pts)]
    return RenderResult(cloud, hits, keep, len(kept), ray_ids, f, dirs, origin, faces, world,
                        len(poses), len(mesh.vertices))


def _candidate_rays(dirs, origin, world, n_per, n_inst, max_range):
    """Rays that pass within the bounding sphere of some instance."""
    if n_inst == 0 or len(dirs) == 0:
        return np.zeros(0, dtype=np.int64)
    mask = np.zeros(len(dirs), dtype=bool)
    for k in range(n_inst):
        w = world[k * n_per:(k + 1) * n_per]
        c = 0.5 * (w.min(axis=0) + w.max(axis=0))
        r = np.linalg.norm(w - c, axis=1).max() * (1 + 1e-9) + 1e-9
        rel = c - origin
        along = dirs @ rel
        perp2 = np.dot(rel, rel) - along ** 2
        mask |= (perp2 <= r * r) & (along + r > 0) & (along - r <= max_range)
    return np.flatnonzero(mask)


# --------------------------------------------------------------------------
# derivatives


def hit_jacobian(hit: HitRecord, triangle, direction) -> np.ndarray:
    """3x9 Jacobian of the hit point w.r.t. the three triangle vertices.

    The ray is held fixed. Moving vertex ``k`` by ``dv`` shifts the range by
    ``w_k (n . dv) / (n . d)`` where ``w`` are the barycentric weights and
    ``n`` the (unnormalized) face normal.
    """
    v0, v1, v2 = np.asarray(triangle, dtype=float)
    d = np.asarray(direction, dtype=float)
    n = np.cross(v1 - v0, v2 - v0)
    nd = float(np.dot(n, d))
    if abs(nd) < DET_EPS:
        raise RenderError("near-degenerate hit; drop it from the backward pass")
    w = (1.0 - hit.u - hit.v, hit.u, hit.v)
    return np.hstack([np.outer(d, wk * n / nd) for wk in w])


def vertex_gradient(result: RenderResult, grad_hits: np.ndarray, world_vertices: np.ndarray | None = None
                    ) -> np.ndarray:
    """Chain per-hit-point gradients (H, 3) to world vertex gradients (V, 3).

    Vectorized form of summing ``hit_jacobian(...).T @ g`` over all hits;
    near-degenerate hits are skipped.
    """
    if world_vertices is None:
        world_vertices = result.world_vertices
    out = np.zeros_like(world_vertices)
    if len(result.face_ids) == 0:
        return out
    fidx = result.faces[result.face_ids]
    tri = world_vertices[fidx]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nd = np.einsum("ij,ij->i", n, result.directions)
    ok = np.abs(nd) >= DET_EPS
    # barycentrics at the current vertices (matches the frozen-assignment hit point)
    pts = result.hit_points(world_vertices)
    w = _barycentric(pts, tri)
    dt = np.einsum("ij,ij->i", result.directions, grad_hits)
    scale = np.where(ok, dt / np.where(ok, nd, 1.0), 0.0)
    for k in range(3):
        np.add.at(out, fidx[:, k], (w[:, k] * scale)[:, None] * n)
    return out


def _barycentric(p, tri):
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    r = p - v0
    d00 = np.einsum("ij,ij->i", e1, e1)
    d01 = np.einsum("ij,ij->i", e1, e2)
    d11 = np.einsum("ij,ij->i", e2, e2)
    d20 = np.einsum("ij,ij->i", r, e1)
    d21 = np.einsum("ij,ij->i", r, e2)
    den = d00 * d11 - d01 * d01
    den = np.where(np.abs(den) > 0, den, 1.0)
    u = (d11 * d20 - d01 * d21) / den
    v = (d00 * d21 - d01 * d20) / den
    return np.column_stack([1 - u - v, u, v])
