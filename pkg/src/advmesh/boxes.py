"""Oriented 3D boxes, detections and rotated-box overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    """Box with center (x, y, z), size (l, w, h) and yaw about +z."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got {(self.l, self.w, self.h)}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def corners_bev(self) -> np.ndarray:
        """(4, 2) footprint corners, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = self.l / 2, self.w / 2
        local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points (N, >=3) inside the box (boundary inclusive)."""
        p = np.asarray(points)[:, :3] - np.array([self.x, self.y, self.z])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = c * p[:, 0] + s * p[:, 1]
        ly = -s * p[:, 0] + c * p[:, 1]
        return (np.abs(lx) <= self.l / 2) & (np.abs(ly) <= self.w / 2) & (np.abs(p[:, 2]) <= self.h / 2)


def sigmoid(s):
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Detection:
    """A detector output: box, raw logit and class label."""

    box: Box3D
    logit: float
    label: int = 0

    @property
    def score(self) -> float:
        return sigmoid(self.logit)


# --------------------------------------------------------------------------
# overlap


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex CCW polygon."""
    out = list(subject)
    n = len(clipper)
    for k in range(n):
        a, b = clipper[k], clipper[(k + 1) % n]
        edge = b - a
        inp, out = out, []
        if not inp:
            break

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
            prev, sp = cur, sc
    return np.array(out).reshape(-1, 2)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.x - b.x, a.y - b.y) >= ra + rb:
        return 0.0
    return _polygon_area(clip_convex(a.corners_bev(), b.corners_bev()))


def _iou(inter: float, area_a: float, area_b: float) -> float:
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU in the xy-plane."""
    # clip in a fixed order so that iou(a, b) == iou(b, a) bitwise
    if (a.to_array().tolist() > b.to_array().tolist()):
        a, b = b, a
    return _iou(bev_intersection(a, b), a.l * a.w, b.l * b.w)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection times vertical overlap over union volume."""
    if (a.to_array().tolist() > b.to_array().tolist()):
        a, b = b, a
    zo = min(a.z + a.h / 2, b.z + b.h / 2) - max(a.z - a.h / 2, b.z - b.h / 2)
    if zo <= 0:
        return 0.0
    return _iou(bev_intersection(a, b) * zo, a.volume, b.volume)


def box_iou(a: Box3D, b: Box3D, mode: str = "3d") -> float:
    if mode == "3d":
        return iou_3d(a, b)
    if mode == "bev":
        return bev_iou(a, b)
    raise ValueError(f"unknown IoU mode {mode!r}")
