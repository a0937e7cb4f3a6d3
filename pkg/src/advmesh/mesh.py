"""Triangle meshes, icosphere construction, box-constrained deformation and
the mesh-intrinsic invisibility metrics (Laplacian smoothness, signed
volume, bird's-eye-view area)."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

MAX_SPHERE_LEVEL = 6


class MeshError(ValueError):
    """Raised for malformed meshes or mesh files."""


class TriangleMesh:
    """Vertex/face triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
        Vertex coordinates in meters.
    faces : array_like, shape (F, 3)
        Vertex index triples, counter-clockwise seen from outside.
    validate : bool
        If True (default) the mesh must be watertight: every undirected edge
        is shared by exactly two faces. Pass False for open triangle soups,
        which only support the projection metrics.
    """

    def __init__(self, vertices, faces, validate: bool = True):
        self.vertices = np.ascontiguousarray(vertices, dtype=float).reshape(-1, 3)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) == 0:
            raise MeshError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise MeshError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        self.watertight = _edges_shared_twice(self.faces)
        if validate and not self.watertight:
            raise MeshError("mesh is not watertight (some edge is not shared by exactly two faces)")

    def __repr__(self):
        return f"TriangleMesh(V={len(self.vertices)}, F={len(self.faces)})"

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of face corner coordinates."""
        return self.vertices[self.faces]

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same topology, new coordinates (no re-validation)."""
        out = object.__new__(TriangleMesh)
        out.vertices = np.ascontiguousarray(vertices, dtype=float).reshape(-1, 3)
        out.faces = self.faces
        out.watertight = self.watertight
        return out

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def degenerate_faces(self, tol: float = 1e-14) -> list[int]:
        """Indices of faces with (numerically) zero area."""
        return np.flatnonzero(self.face_areas() <= tol).tolist()

    def neighbors(self) -> list[np.ndarray]:
        """1-ring vertex neighborhoods over mesh edges."""
        adj = _adjacency(self.faces, len(self.vertices))
        return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]] for i in range(adj.shape[0])]


def _edges_shared_twice(faces: np.ndarray) -> bool:
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def _adjacency(faces: np.ndarray, n: int) -> sparse.csr_matrix:
    i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2], faces[:, 1], faces[:, 2], faces[:, 0]])
    j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0], faces[:, 0], faces[:, 1], faces[:, 2]])
    adj = sparse.coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0
    adj.sort_indices()
    return adj


# --------------------------------------------------------------------------
# icosphere


@dataclass(frozen=True)
class SphereSpec:
    """Icosphere level and per-axis scale (meters)."""

    level: int = 2
    scale: tuple[float, float, float] = (0.7, 0.7, 0.5)

    def __post_init__(self):
        if not (0 <= int(self.level) <= MAX_SPHERE_LEVEL) or int(self.level) != self.level:
            raise ValueError(f"sphere level must be an integer in [0, {MAX_SPHERE_LEVEL}], got {self.level}")
        if len(self.scale) != 3 or min(self.scale) <= 0:
            raise ValueError(f"sphere scale must be three positive numbers, got {self.scale}")
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))


def _icosahedron():
    p = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ], dtype=float)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


def icosphere(spec: SphereSpec) -> TriangleMesh:
    """Subdivided icosahedron projected to the unit sphere, scaled per axis.

    Level ``n`` has ``10 * 4**n + 2`` vertices and ``20 * 4**n`` faces.
    """
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(spec.level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            idx = cache.get(key)
            if idx is None:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                idx = cache[key] = len(verts) - 1
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    v = np.array(verts) * np.asarray(spec.scale)
    return TriangleMesh(v, faces)


# --------------------------------------------------------------------------
# deformation


@dataclass
class DeformationState:
    """Learnable deformation of a base mesh.

    Vertex ``i`` materializes as ``clip(v0_i + dv_i, -b, b) + clip(g, -c, c)``
    in the object-local frame.
    """

    base_vertices: np.ndarray
    faces: np.ndarray
    displacements: np.ndarray = None
    global_offset: np.ndarray = None
    offset_limit: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1, 0.0]))
    scale_box: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.5]))

    def __post_init__(self):
        self.base_vertices = np.asarray(self.base_vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.displacements is None:
            self.displacements = np.zeros_like(self.base_vertices)
        self.displacements = np.asarray(self.displacements, dtype=float).reshape(-1, 3)
        if self.global_offset is None:
            self.global_offset = np.zeros(3)
        self.global_offset = np.asarray(self.global_offset, dtype=float).reshape(3)
        self.offset_limit = np.asarray(self.offset_limit, dtype=float).reshape(3)
        self.scale_box = np.asarray(self.scale_box, dtype=float).reshape(3)
        if self.displacements.shape != self.base_vertices.shape:
            raise ValueError("displacements must match base vertices")
        if np.any(self.offset_limit < 0) or np.any(self.scale_box <= 0):
            raise ValueError("offset limit must be >= 0 and scale box > 0")

    @classmethod
    def from_sphere(cls, spec: SphereSpec, offset_limit=(0.1, 0.1, 0.0)) -> "DeformationState":
        mesh = icosphere(spec)
        return cls(mesh.vertices, mesh.faces, offset_limit=np.array(offset_limit, dtype=float),
                   scale_box=np.array(spec.scale))

    def copy(self) -> "DeformationState":
        return DeformationState(self.base_vertices.copy(), self.faces.copy(), self.displacements.copy(),
                                self.global_offset.copy(), self.offset_limit.copy(), self.scale_box.copy())

    def projected(self) -> "DeformationState":
        """Project onto the feasible set.

        Only out-of-bounds coordinates are rewritten so projection is
        bitwise idempotent.
        """
        out = self.copy()
        b = self.scale_box
        raw = out.base_vertices + out.displacements
        hi, lo = raw > b, raw < -b
        out.displacements = np.where(hi, b - out.base_vertices, out.displacements)
        out.displacements = np.where(lo, -b - out.base_vertices, out.displacements)
        # b - v0 can round so that v0 + dv lands one ulp outside; step back inward
        for _ in range(4):
            raw = out.base_vertices + out.displacements
            over, under = raw > b, raw < -b
            if not (over.any() or under.any()):
                break
            out.displacements = np.where(over, np.nextafter(out.displacements, -np.inf), out.displacements)
            out.displacements = np.where(under, np.nextafter(out.displacements, np.inf), out.displacements)
        out.global_offset = np.clip(out.global_offset, -self.offset_limit, self.offset_limit)
        return out

    def local_vertices(self) -> np.ndarray:
        b = self.scale_box
        g = np.clip(self.global_offset, -self.offset_limit, self.offset_limit)
        return np.clip(self.base_vertices + self.displacements, -b, b) + g


def apply_deformation(state: DeformationState) -> TriangleMesh:
    """Materialize the projected deformation as a mesh in the local frame.

    Zero-area faces are kept (indexing stays stable) and logged.
    """
    mesh = TriangleMesh(state.local_vertices(), state.faces, validate=False)
    degenerate = mesh.degenerate_faces()
    if degenerate:
        logger.debug("deformed mesh has %d degenerate faces", len(degenerate))
    return mesh


def l2_norm(state: DeformationState) -> float:
    """L2 norm of the materialized vertex change relative to initialization."""
    return float(np.linalg.norm(state.local_vertices() - state.base_vertices))


# --------------------------------------------------------------------------
# metrics


def laplacian_loss(mesh: TriangleMesh) -> tuple[float, np.ndarray]:
    """Sum over vertices of squared distance to the 1-ring centroid.

    Returns the scalar and its exact gradient with respect to every vertex.
    """
    adj = _adjacency(mesh.faces, len(mesh.vertices))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise MeshError("mesh has isolated vertices with no neighbors")
    lap = sparse.identity(len(deg), format="csr") - sparse.diags(1.0 / deg) @ adj
    r = lap @ mesh.vertices
    value = float(np.sum(r * r))
    grad = 2.0 * (lap.T @ r)
    return value, np.asarray(grad)


def signed_volume(mesh: TriangleMesh) -> float:
    """Enclosed volume from the sum of origin-apex tetrahedra (absolute value)."""
    if not mesh.watertight:
        raise MeshError("volume requires a watertight mesh")
    tri = mesh.triangles
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    return float(abs(vol))


def _raster_union(tri2d: np.ndarray, lo: np.ndarray, cell: float, shape: tuple[int, int]) -> int:
    """Count grid cells whose centers fall in at least one triangle."""
    grid = np.zeros(shape, dtype=bool)
    nx, ny = shape
    for a, b, c in tri2d:
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area2) <= 1e-18:
            continue
        mn = np.minimum(np.minimum(a, b), c)
        mx = np.maximum(np.maximum(a, b), c)
        i0 = max(int(np.floor((mn[0] - lo[0]) / cell - 0.5)), 0)
        i1 = min(int(np.ceil((mx[0] - lo[0]) / cell - 0.5)), nx - 1)
        j0 = max(int(np.floor((mn[1] - lo[1]) / cell - 0.5)), 0)
        j1 = min(int(np.ceil((mx[1] - lo[1]) / cell - 0.5)), ny - 1)
        if i1 < i0 or j1 < j0:
            continue
        px = lo[0] + (np.arange(i0, i1 + 1) + 0.5) * cell
        py = lo[1] + (np.arange(j0, j1 + 1) + 0.5) * cell
        X, Y = np.meshgrid(px, py, indexing="ij")
        s = np.sign(area2)
        eps = 1e-12 * cell
        e0 = s * ((b[0] - a[0]) * (Y - a[1]) - (b[1] - a[1]) * (X - a[0])) >= -eps
        e1 = s * ((c[0] - b[0]) * (Y - b[1]) - (c[1] - b[1]) * (X - b[0])) >= -eps
        e2 = s * ((a[0] - c[0]) * (Y - c[1]) - (a[1] - c[1]) * (X - c[0])) >= -eps
        grid[i0:i1 + 1, j0:j1 + 1] |= e0 & e1 & e2
    return int(grid.sum())


def bev_area(mesh: TriangleMesh, rel_tol: float = 0.0025, start_cells: int = 256,
             max_cells: int = 8192) -> float:
    """Area of the union of all faces projected onto the xy-plane.

    Rasterizes cell centers, doubling the resolution until two successive
    estimates agree within ``rel_tol``.
    """
    tri2d = mesh.triangles[:, :, :2]
    lo = tri2d.reshape(-1, 2).min(axis=0)
    hi = tri2d.reshape(-1, 2).max(axis=0)
    span = float(np.max(hi - lo))
    if span <= 0:
        return 0.0
    prev = None
    n = start_cells
    while True:
        cell = span / n
        shape = (max(int(np.ceil((hi[0] - lo[0]) / cell)), 1), max(int(np.ceil((hi[1] - lo[1]) / cell)), 1))
        area = _raster_union(tri2d, lo, cell, shape) * cell * cell
        if prev is not None and (area == prev or abs(area - prev) <= rel_tol * max(abs(area), 1e-300)):
            return float(area)
        if n >= max_cells:
            logger.warning("bev_area did not converge to %.2g at %d cells", rel_tol, n)
            return float(area)
        prev = area
        n *= 2


# --------------------------------------------------------------------------
# OBJ and state text formats


def export_obj(mesh: TriangleMesh) -> bytes:
    """Wavefront OBJ text (``v x y z`` / ``f i j k``, 1-based)."""
    out = io.StringIO()
    out.write("# advmesh OBJ\n")
    for x, y, z in mesh.vertices.tolist():
        out.write(f"v {x!r} {y!r} {z!r}\n")
    for a, b, c in (mesh.faces + 1).tolist():
        out.write(f"f {a} {b} {c}\n")
    return out.getvalue().encode("ascii")


def import_obj(data: bytes | str, validate: bool = True) -> TriangleMesh:
    """Parse OBJ text. Only ``v`` and triangular ``f`` records are used."""
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs three coordinates")
                verts.append([float(p) for p in parts[1:4]])
            elif tag == "f":
                if len(parts) != 4:
                    raise ValueError("only triangular faces are supported")
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if min(idx) < 0 or max(idx) >= len(verts):
                    raise ValueError("face references an undefined vertex")
                faces.append(idx)
        except ValueError as exc:
            raise MeshError(f"OBJ line {lineno}: {exc}") from None
    if not faces:
        raise MeshError("OBJ contains no faces")
    return TriangleMesh(np.array(verts), np.array(faces), validate=validate)


def dump_state(state: DeformationState) -> str:
    """Plain-text checkpoint of a deformation state."""
    lines = ["# advmesh-state 1"]
    lines.append("b " + " ".join(repr(float(x)) for x in state.scale_box))
    lines.append("c " + " ".join(repr(float(x)) for x in state.offset_limit))
    lines.append("g " + " ".join(repr(float(x)) for x in state.global_offset))
    for v0, dv in zip(state.base_vertices, state.displacements):
        lines.append("v0 " + " ".join(repr(float(x)) for x in v0) + " dv " + " ".join(repr(float(x)) for x in dv))
    for f in state.faces:
        lines.append("f " + " ".join(str(int(i)) for i in f))
    return "\n".join(lines) + "\n"


def load_state(text: str) -> DeformationState:
    fields: dict[str, np.ndarray] = {}
    v0, dv, faces = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] in ("b", "c", "g"):
                fields[parts[0]] = np.array([float(p) for p in parts[1:4]])
            elif parts[0] == "v0":
                v0.append([float(p) for p in parts[1:4]])
                dv.append([float(p) for p in parts[5:8]])
            elif parts[0] == "f":
                faces.append([int(p) for p in parts[1:4]])
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            raise MeshError(f"state line {lineno}: {exc}") from None
    missing = {"b", "c", "g"} - fields.keys()
    if missing or not v0 or not faces:
        raise MeshError(f"incomplete state file (missing {sorted(missing) or 'vertices/faces'})")
    return DeformationState(np.array(v0), np.array(faces), np.array(dv), fields["g"], fields["c"], fields["b"])
