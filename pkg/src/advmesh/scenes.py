"""KITTI-format ingestion, synthetic scenes and rooftop placement.

Sensor frame: x forward, y left, z up, origin at the LiDAR. KITTI labels
are given in the rectified camera frame (x right, y down, z forward); they
are mapped with the fixed rotation

    x_lidar = z_cam,  y_lidar = -x_cam,  z_lidar = -y_cam

ignoring the small camera/LiDAR translation, and ``yaw = -rotation_y - pi/2``.
KITTI's location is the bottom-face center, so the box center is lifted by
h/2.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import Box3D
from .render import Pose, RayPattern, cast_rays, hdl64_pattern

MIN_POINTS_PER_BOX = 10


class SceneFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# KITTI files


def load_kitti_bin(data: bytes) -> np.ndarray:
    """Parse a velodyne scan (little-endian float32 x, y, z, r); r is zeroed."""
    if len(data) % 16:
        raise SceneFormatError(f"velodyne scan length {len(data)} is not a multiple of 16 bytes")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    pts[:, 3] = 0.0
    return pts


def dump_kitti_bin(points: np.ndarray) -> bytes:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 4)
    return pts.tobytes()


def load_kitti_labels(text: str, classes=("Car",)) -> list[tuple[str, Box3D]]:
    """Parse KITTI label lines, keeping ``classes``, as sensor-frame boxes."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 15:
            raise SceneFormatError(f"label line {lineno}: expected 15 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts[1:15]]
        except ValueError as exc:
            raise SceneFormatError(f"label line {lineno}: {exc}") from None
        if parts[0] not in classes:
            continue
        h, w, l = vals[7:10]
        xc, yc, zc = vals[10:13]
        ry = vals[13]
        try:
            box = Box3D(zc, -xc, -yc + h / 2, l, w, h, -ry - math.pi / 2)
        except ValueError as exc:
            raise SceneFormatError(f"label line {lineno}: {exc}") from None
        out.append((parts[0], box))
    return out


def box_to_kitti_label(box: Box3D, cls: str = "Car") -> str:
    """Inverse of :func:`load_kitti_labels` for one box (2D fields zeroed)."""
    ry = -box.yaw - math.pi / 2
    ry = math.atan2(math.sin(ry), math.cos(ry))
    return (f"{cls} 0.00 0 0.00 0.00 0.00 0.00 0.00 {box.h!r} {box.w!r} {box.l!r} "
            f"{-box.y!r} {-(box.z - box.h / 2)!r} {box.x!r} {ry!r}")


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneSample:
    cloud: np.ndarray
    gt_boxes: list[Box3D]
    poses: list[Pose]
    seed: int | None = None
    distractors: list[Box3D] = field(default_factory=list)


@dataclass
class SyntheticSceneSpec:
    """Distribution of synthetic scenes.

    One car (cuboid, labeled) per scene with heading drawn from
    ``headings`` plus uniform jitter in ``yaw``, an optional unlabeled tall
    distractor vehicle (van/truck), ground-plane returns and uniform
    clutter.
    """

    car_size_mean: tuple[float, float, float] = (4.0, 1.7, 1.5)
    car_size_std: tuple[float, float, float] = (0.05, 0.03, 0.03)
    distance: tuple[float, float] = (6.0, 25.0)
    lateral: tuple[float, float] = (-8.0, 8.0)
    yaw: tuple[float, float] = (-0.05, 0.05)              # jitter around the heading
    headings: tuple[float, ...] = (0.0, math.pi / 2)      # drawn uniformly per object
    ground_z: float = -1.73
    clutter: int = 0
    clutter_height: float = 3.0
    distractor_prob: float = 0.0
    distractor_size_mean: tuple[float, float, float] = (5.0, 2.0, 2.6)
    distractor_size_std: tuple[float, float, float] = (0.3, 0.1, 0.2)
    ground: bool = True
    max_retries: int = 50
    pattern: dict = field(default_factory=lambda: {"mode": "full"})

    def __post_init__(self):
        if self.distance[0] <= 0 or self.distance[1] < self.distance[0]:
            raise ValueError("distance range must be positive and ordered")
        if min(self.car_size_mean) <= 0:
            raise ValueError("car sizes must be positive")

    def ray_pattern(self) -> RayPattern:
        return hdl64_pattern(**self.pattern)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


def box_mesh(box: Box3D):
    """12-triangle outward-oriented cuboid of a box (vertices, faces)."""
    sx, sy, sz = box.l / 2, box.w / 2, box.h / 2
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],     # -x, +x
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],     # -y, +y
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],     # -z, +z
    ])
    pose = Pose((box.x, box.y, box.z), box.yaw)
    return pose.apply(v), faces


def rooftop_pose(box: Box3D) -> Pose:
    """Center of the box's top face, rotated with the box."""
    return Pose((box.x, box.y, box.z + box.h / 2), box.yaw)


def scan_scene(pattern: RayPattern, boxes: list[Box3D], ground_z: float | None) -> np.ndarray:
    """Cast ``pattern`` against cuboids and an optional ground plane."""
    origin = np.asarray(pattern.sensor_origin)
    dirs = pattern.directions()
    if boxes:
        vs, fs = zip(*(box_mesh(b) for b in boxes))
        tris = np.concatenate([v[f] for v, f in zip(vs, fs)])
    else:
        tris = np.zeros((0, 3, 3))
    t, face, _, _ = cast_rays(origin, dirs, tris, pattern.max_range)
    if ground_z is not None:
        with np.errstate(divide="ignore"):
            tg = np.where(dirs[:, 2] < 0, (ground_z - origin[2]) / dirs[:, 2], np.inf)
        tg = np.where(tg <= pattern.max_range, tg, np.inf)
        t = np.minimum(t, tg)
    hit = np.isfinite(t)
    pts = origin + t[hit, None] * dirs[hit]
    return np.column_stack([pts, np.zeros(len(pts))])


def synth_scene(spec: SyntheticSceneSpec, rng: np.random.Generator | int) -> SceneSample:
    """Draw one scene; resampled until the car box holds >= 10 points."""
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng) if seed is not None else rng
    pattern = spec.ray_pattern()
    for _ in range(spec.max_retries):
        size = np.asarray(spec.car_size_mean) + np.asarray(spec.car_size_std) * rng.standard_normal(3)
        size = np.maximum(size, 0.1)
        x = rng.uniform(*spec.distance)
        y = rng.uniform(*spec.lateral)
        yaw = spec.headings[rng.integers(len(spec.headings))] + rng.uniform(*spec.yaw)
        car = Box3D(x, y, spec.ground_z + size[2] / 2, size[0], size[1], size[2], yaw)
        boxes = [car]
        distractors = []
        if spec.distractor_prob > 0 and rng.uniform() < spec.distractor_prob:
            dsize = np.asarray(spec.distractor_size_mean) + np.asarray(spec.distractor_size_std) * rng.standard_normal(3)
            dsize = np.maximum(dsize, 0.5)
            for _attempt in range(20):
                dx = rng.uniform(*spec.distance)
                dy = rng.uniform(*spec.lateral)
                # keep a clear gap between circumscribed circles
                gap = (math.hypot(size[0], size[1]) + math.hypot(dsize[0], dsize[1])) / 2 + 0.5
                if math.hypot(dx - x, dy - y) > gap:
                    distractors.append(Box3D(dx, dy, spec.ground_z + dsize[2] / 2, dsize[0], dsize[1], dsize[2],
                                             spec.headings[rng.integers(len(spec.headings))]
                                             + rng.uniform(*spec.yaw)))
                    break
        cloud = scan_scene(pattern, boxes + distractors, spec.ground_z if spec.ground else None)
        if spec.clutter:
            lo = np.array([spec.distance[0], spec.lateral[0], spec.ground_z])
            hi = np.array([spec.distance[1] + 5.0, spec.lateral[1], spec.ground_z + spec.clutter_height])
            c = rng.uniform(lo, hi, size=(spec.clutter, 3))
            cloud = np.concatenate([cloud, np.column_stack([c, np.zeros(len(c))])])
        if int(car.contains(cloud).sum()) >= MIN_POINTS_PER_BOX:
            return SceneSample(cloud, [car], [rooftop_pose(car)], seed, distractors)
    raise RuntimeError(f"could not draw a scene with >= {MIN_POINTS_PER_BOX} car points "
                       f"in {spec.max_retries} attempts")


@dataclass
class Manifest:
    """Regenerable synthetic dataset: a spec and one seed per scene."""

    spec: SyntheticSceneSpec
    seeds: list[int]

    @classmethod
    def create(cls, spec: SyntheticSceneSpec, n: int, seed: int) -> "Manifest":
        ss = np.random.SeedSequence(seed)
        seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
        return cls(spec, seeds)

    def scenes(self):
        for s in self.seeds:
            yield synth_scene(self.spec, s)

    def to_json(self) -> str:
        return json.dumps({"spec": self.spec.to_dict(), "seeds": self.seeds}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        d = json.loads(text)
        return cls(SyntheticSceneSpec.from_dict(d["spec"]), [int(s) for s in d["seeds"]])


def load_kitti_scene(bin_bytes: bytes, label_text: str) -> SceneSample:
    """KITTI scan + labels; boxes with fewer than 10 points are dropped."""
    cloud = load_kitti_bin(bin_bytes)
    boxes = [b for _, b in load_kitti_labels(label_text)]
    boxes = [b for b in boxes if int(b.contains(cloud).sum()) >= MIN_POINTS_PER_BOX]
    return SceneSample(cloud, boxes, [rooftop_pose(b) for b in boxes])
