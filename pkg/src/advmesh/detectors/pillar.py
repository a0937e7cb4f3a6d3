"""Trainable pillar-style detector: logistic anchor classifier on soft-binned
band features plus a linear box-offset head.

Per anchor the classifier sees ``log1p`` of seven footprint masses (body
band, above-roof band, a four-bin height histogram of the body band and a
column band reaching a little above the roof), the column mass in thirds
and halves of the footprint, and the body and above-roof masses of a ring
around the footprint. The ring terms let a linear model prefer anchors
centered on an object over anchors that only clip it; the sub-region
masses let the offset head see how the points are spread. The offset head
additionally sees soft point extents inside an enlarged anchor window,
which lets it place the box from the visible faces of the car.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..boxes import Box3D, Detection, bev_iou
from .base import Detector, DetectorError
from .grid import BevGrid, window_sum, log_logistic, logistic, soft_above, soft_band
from .template import BAND_WIDTH, BandFeatures

logger = logging.getLogger(__name__)

N_BANDS = 7
N_FEATURES = 14
N_EXTENTS = 4


@dataclass
class PillarConfig:
    x_range: tuple[float, float] = (0.0, 40.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    cell: float = 0.2
    bandwidth: float = 0.2
    anchor_size: tuple[float, float, float] = (4.0, 1.7, 1.5)
    anchor_yaws: tuple[float, ...] = (0.0, math.pi / 2)
    ground_z: float = -1.73
    body_floor: float = 0.25
    roof_height: float = 1.6
    column_top: float = 1.7         # top of the band used by the sub-region masses
    emit_threshold: float = 0.05
    nms_iou: float = 0.1
    pre_nms_iou: float = 0.5
    max_detections: int = 50
    ring_margin: float = 1.0        # context ring width around the footprint
    window_margin: float = 1.0      # extent window grows the footprint by this much per side
    window_softness: float = 0.02
    sensor_xy: tuple[float, float] = (0.0, 0.0)
    extent_temperature: float = 0.05
    extent_weight_scale: float = 1.5  # meters of extent traded per unit of log weight

    def grid(self) -> BevGrid:
        return BevGrid(self.x_range[0], self.x_range[1], self.y_range[0], self.y_range[1],
                       self.cell, self.bandwidth)

    def __post_init__(self):
        for yaw in self.anchor_yaws:
            q = yaw / (math.pi / 2)
            if abs(q - round(q)) > 1e-9:
                raise ValueError("anchor yaws must be multiples of pi/2")

    def half_cells(self, yaw: float) -> tuple[int, int]:
        l, w = self.anchor_size[0], self.anchor_size[1]
        ex = abs(math.cos(yaw)) * l + abs(math.sin(yaw)) * w
        ey = abs(math.sin(yaw)) * l + abs(math.cos(yaw)) * w
        return int(math.floor(ex / (2 * self.cell) + 1e-9)), int(math.floor(ey / (2 * self.cell) + 1e-9))

    def bands(self):
        lo, hi = self.body_floor, self.roof_height
        g = self.ground_z
        edges = np.linspace(lo, hi, 5)
        out = [
            lambda z: soft_band(z - g, lo, hi, BAND_WIDTH),
            lambda z: soft_above(z - g, hi, BAND_WIDTH),
        ]
        for a, b in zip(edges[:-1], edges[1:]):
            out.append(lambda z, a=a, b=b: soft_band(z - g, a, b, BAND_WIDTH))
        out.append(lambda z: soft_band(z - g, lo, self.column_top, BAND_WIDTH))
        return out


@dataclass
class PillarWeights:
    """Standardization statistics plus one classifier and offset head per anchor yaw."""

    feat_mean: np.ndarray
    feat_std: np.ndarray
    cls_w: np.ndarray          # (n_yaws, N_FEATURES)
    cls_b: np.ndarray          # (n_yaws,)
    reg_w: np.ndarray          # (n_yaws, 3, N_FEATURES + N_EXTENTS)
    reg_b: np.ndarray          # (n_yaws, 3)

    @classmethod
    def initial(cls, n_yaws: int, bias: float = -5.0) -> "PillarWeights":
        return cls(np.zeros(N_FEATURES), np.ones(N_FEATURES), np.zeros((n_yaws, N_FEATURES)),
                   np.full(n_yaws, float(bias)), np.zeros((n_yaws, 3, N_FEATURES + N_EXTENTS)),
                   np.zeros((n_yaws, 3)))

    def copy(self) -> "PillarWeights":
        return PillarWeights(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d) -> "PillarWeights":
        return cls(*(np.asarray(d[f], dtype=float) for f in cls.__dataclass_fields__))


# --------------------------------------------------------------------------
# feature maps


def _world_window(window, yaw: float):
    """Rotate a local-frame cell window (x0, x1, y0, y1) by a multiple of pi/2."""
    x0, x1, y0, y1 = window
    q = int(round(yaw / (math.pi / 2))) % 4
    return [(x0, x1, y0, y1), (-y1, -y0, x0, x1), (-x1, -x0, -y1, -y0), (y0, y1, -x1, -x0)][q]


def _flip_window(window, sx: int, sy: int):
    x0, x1, y0, y1 = window
    if sx < 0:
        x0, x1 = -x1, -x0
    if sy < 0:
        y0, y1 = -y1, -y0
    return x0, x1, y0, y1


def anchor_signs(config: PillarConfig, k: int):
    """Per-cell axis flips (sx, sy) that put the sensor on the negative side of
    the anchor's local x' and y' axes. Returns two (nx, ny) arrays of +-1."""
    xs, ys = config.grid().centers()
    yaw = config.anchor_yaws[k]
    c, s = math.cos(yaw), math.sin(yaw)
    dx = config.sensor_xy[0] - xs[:, None]
    dy = config.sensor_xy[1] - ys[None, :]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return np.where(lx > 1e-9, -1, 1), np.where(ly > 1e-9, -1, 1)


def feature_terms(config: PillarConfig):
    """Per feature, a list of (sign, band, local cell window) terms.

    Windows live in the canonical anchor frame, where the sensor sits on
    the negative side of both axes.
    """
    hx = int(math.floor(config.anchor_size[0] / (2 * config.cell) + 1e-9))
    hy = int(math.floor(config.anchor_size[1] / (2 * config.cell) + 1e-9))
    m = int(round(config.ring_margin / config.cell))
    fp = (-hx, hx, -hy, hy)
    outer = (-hx - m, hx + m, -hy - m, hy + m)
    t = (2 * hx + 1) // 3
    terms = [[(1.0, b, fp)] for b in range(N_BANDS)]
    terms += [
        [(1.0, 6, (-hx, -hx + t - 1, -hy, hy))],         # near third along x'
        [(1.0, 6, (-hx + t, hx - t, -hy, hy))],
        [(1.0, 6, (hx - t + 1, hx, -hy, hy))],
        [(1.0, 6, (-hx, hx, -hy, 0))],                   # near and far halves along y'
        [(1.0, 6, (-hx, hx, 0, hy))],
        [(1.0, 0, outer), (-1.0, 0, fp)],                # context ring
        [(1.0, 1, outer), (-1.0, 1, fp)],
    ]
    return terms


class AnchorFeatures:
    """Window masses for every anchor of every yaw, with backprop."""

    def __init__(self, config: PillarConfig, cloud: np.ndarray):
        self.config = config
        self.terms = feature_terms(config)
        self.bands = BandFeatures(config.grid(), cloud, config.bands())
        self.signs = [anchor_signs(config, k) for k in range(len(config.anchor_yaws))]
        self.raw = []          # per yaw: (nx, ny, N_FEATURES)
        grids = self.bands.grids
        for yaw, (sx, sy) in zip(config.anchor_yaws, self.signs):
            cache = {}
            out = np.zeros(sx.shape + (N_FEATURES,))
            for fx, fy, sel in self._variants(sx, sy):
                for f, terms in enumerate(self.terms):
                    acc = 0.0
                    for sign, band, win in terms:
                        key = (band, _world_window(_flip_window(win, fx, fy), yaw))
                        if key not in cache:
                            cache[key] = window_sum(grids[band], *key[1])
                        acc = acc + sign * cache[key]
                    out[..., f] = np.where(sel, acc, out[..., f])
            self.raw.append(out)

    @staticmethod
    def _variants(sx, sy):
        for fx in (1, -1):
            for fy in (1, -1):
                sel = (sx == fx) & (sy == fy)
                if sel.any():
                    yield fx, fy, sel

    def backward(self, dfeat: list[np.ndarray]) -> np.ndarray:
        """``dfeat[k]`` is d(loss)/d(raw feature) of shape (nx, ny, N_FEATURES) for yaw k."""
        cell = [None] * N_BANDS
        for yaw, (sx, sy), g in zip(self.config.anchor_yaws, self.signs, dfeat):
            if g is None or not g.any():
                continue
            for fx, fy, sel in self._variants(sx, sy):
                for f, terms in enumerate(self.terms):
                    gf = np.where(sel, g[..., f], 0.0)
                    if not gf.any():
                        continue
                    for sign, band, win in terms:
                        x0, x1, y0, y1 = _world_window(_flip_window(win, fx, fy), yaw)
                        adj = sign * window_sum(gf, -x1, -x0, -y1, -y0)
                        cell[band] = adj if cell[band] is None else cell[band] + adj
        return self.bands.backward(cell)


def soft_extents(points: np.ndarray, center, yaw: float, config: PillarConfig, sx: int = 1, sy: int = 1):
    """Soft min/max of x' and y' over body-band points in the anchor window.

    Coordinates are in the canonical anchor frame (local axes scaled by the
    flips ``sx``, ``sy``). Returns ``(ext, grad)`` where
    ``ext = [xmin, xmax, ymin, ymax]`` relative to the anchor center and
    ``grad`` has shape (4, N, 3) in world xyz.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    rel = points[:, :2] - np.asarray(center)[None, :2]
    xp = sx * (c * rel[:, 0] + s * rel[:, 1])
    yp = sy * (-s * rel[:, 0] + c * rel[:, 1])
    hx = config.anchor_size[0] / 2 + config.window_margin
    hy = config.anchor_size[1] / 2 + config.window_margin
    sw = config.window_softness
    lo, hi, bw = config.body_floor, config.roof_height, BAND_WIDTH
    zr = points[:, 2] - config.ground_z
    ax, bx_ = (hx - xp) / sw, (hx + xp) / sw
    ay, by_ = (hy - yp) / sw, (hy + yp) / sw
    az, bz = (zr - lo) / bw, (hi - zr) / bw
    # log of the window * body-band weight and its partials
    lw = (log_logistic(ax) + log_logistic(bx_) + log_logistic(ay) + log_logistic(by_)
          + log_logistic(az) + log_logistic(bz))
    dlw_x = (-logistic(-ax) + logistic(-bx_)) / sw
    dlw_y = (-logistic(-ay) + logistic(-by_)) / sw
    dlw_z = (logistic(-az) - logistic(-bz)) / bw
    T = config.extent_temperature
    beta = config.extent_weight_scale
    ext = np.zeros(4)
    grad = np.zeros((4, len(points), 3))
    for k, (coord, sign, axis) in enumerate([(xp, -1, 0), (xp, 1, 0), (yp, -1, 1), (yp, 1, 1)]):
        # soft max of sign*coord + beta*lw, plus a unit-weight phantom at the center
        a = (beta * lw + sign * coord) / T
        m = max(float(np.max(a)) if len(a) else 0.0, 0.0)
        e = np.exp(a - m)
        z = e.sum() + math.exp(-m)
        ext[k] = sign * T * (m + math.log(z))
        p = e / z
        dx_loc = p * (beta * dlw_x + (sign if axis == 0 else 0.0))
        dy_loc = p * (beta * dlw_y + (sign if axis == 1 else 0.0))
        dx_loc, dy_loc = sign * sx * dx_loc, sign * sy * dy_loc
        grad[k, :, 0] = c * dx_loc - s * dy_loc
        grad[k, :, 1] = s * dx_loc + c * dy_loc
        grad[k, :, 2] = sign * p * beta * dlw_z
    return ext, grad


def _body_points(cloud, config: PillarConfig, floor: float = -40.0):
    """Indices of points that can matter for the soft extents.

    A dropped point's softmax weight is below ``exp(floor)`` relative to the
    unit phantom at the anchor center, even at the far edge of the window.
    """
    zr = cloud[:, 2] - config.ground_z
    lw = (log_logistic((zr - config.body_floor) / BAND_WIDTH)
          + log_logistic((config.roof_height - zr) / BAND_WIDTH))
    reach = max(config.anchor_size[0], config.anchor_size[1]) / 2 + config.window_margin + 0.1
    return np.flatnonzero(config.extent_weight_scale * lw + reach > floor * config.extent_temperature)


def _local_points(cloud, center, config):
    """Indices of points that can influence an anchor's extents."""
    r = math.hypot(config.anchor_size[0], config.anchor_size[1]) / 2 + config.window_margin + 1.0
    d = cloud[:, :2] - np.asarray(center)[None, :2]
    return np.flatnonzero((np.abs(d[:, 0]) <= r) & (np.abs(d[:, 1]) <= r))


def _axis_aligned_iou_matrix(boxes: np.ndarray) -> np.ndarray:
    """BEV IoU between yaw-0 / yaw-pi/2 anchor boxes given as (x, y, ex, ey)."""
    x0 = boxes[:, 0] - boxes[:, 2] / 2
    x1 = boxes[:, 0] + boxes[:, 2] / 2
    y0 = boxes[:, 1] - boxes[:, 3] / 2
    y1 = boxes[:, 1] + boxes[:, 3] / 2
    ix = np.clip(np.minimum(x1[:, None], x1[None]) - np.maximum(x0[:, None], x0[None]), 0, None)
    iy = np.clip(np.minimum(y1[:, None], y1[None]) - np.maximum(y0[:, None], y0[None]), 0, None)
    inter = ix * iy
    area = boxes[:, 2] * boxes[:, 3]
    return inter / (area[:, None] + area[None] - inter)


class PillarDetector(Detector):
    name = "pillar"
    differentiable = True
    has_box_regression = True
    stages = 1

    def __init__(self, config: PillarConfig | None = None, weights: PillarWeights | None = None):
        self.config = config or PillarConfig()
        self.weights = weights or PillarWeights.initial(len(self.config.anchor_yaws))
        self._cache = None

    # -- persistence -------------------------------------------------------
    def save(self, path):
        cfg = asdict(self.config)
        with open(path, "w") as fh:
            json.dump({"config": cfg, "weights": self.weights.to_dict()}, fh)

    @classmethod
    def load(cls, path) -> "PillarDetector":
        with open(path) as fh:
            d = json.load(fh)
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in d["config"].items()}
        return cls(PillarConfig(**cfg), PillarWeights.from_dict(d["weights"]))

    # -- helpers -----------------------------------------------------------
    def standardize(self, raw: np.ndarray) -> np.ndarray:
        return (np.log1p(raw) - self.weights.feat_mean) / self.weights.feat_std

    def logit_maps(self, feats: AnchorFeatures) -> list[np.ndarray]:
        w = self.weights
        return [self.standardize(r) @ w.cls_w[k] + w.cls_b[k] for k, r in enumerate(feats.raw)]

    def anchor_box(self, k: int, i: int, j: int) -> Box3D:
        c = self.config
        xs, ys = c.grid().centers()
        return Box3D(xs[i], ys[j], c.ground_z + c.anchor_size[2] / 2, *c.anchor_size, c.anchor_yaws[k])

    def regress(self, k: int, phi: np.ndarray, ext: np.ndarray) -> np.ndarray:
        """Canonical-frame offsets (dx, dy, dyaw) for a yaw-k anchor."""
        w = self.weights
        return w.reg_w[k] @ np.concatenate([phi, ext]) + w.reg_b[k]

    # -- contract ----------------------------------------------------------
    def forward(self, cloud: np.ndarray) -> list[Detection]:
        c = self.config
        cloud = np.asarray(cloud, dtype=float)
        cloud = cloud.reshape(len(cloud), -1) if len(cloud) else np.zeros((0, 4))
        feats = AnchorFeatures(c, cloud)
        maps = self.logit_maps(feats)
        thr = math.log(c.emit_threshold / (1 - c.emit_threshold))
        cand = []
        for k, m in enumerate(maps):
            ii, jj = np.nonzero(m > thr)
            cand += [(float(m[i, j]), k, int(i), int(j)) for i, j in zip(ii, jj)]
        cand.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
        # coarse suppression on anchor boxes, then final suppression on regressed boxes
        cand = self._anchor_nms(cand)
        xs, ys = c.grid().centers()
        body = _body_points(cloud, c)
        dets, cache = [], []
        for logit, k, i, j in cand:
            yaw_a = c.anchor_yaws[k]
            center = np.array([xs[i], ys[j]])
            fx, fy = int(feats.signs[k][0][i, j]), int(feats.signs[k][1][i, j])
            idx = body[_local_points(cloud[body], center, c)]
            ext, gext = soft_extents(cloud[idx], center, yaw_a, c, fx, fy)
            phi = self.standardize(feats.raw[k][i, j])
            d = self.regress(k, phi, ext)
            dx, dy, dyaw = fx * d[0], fy * d[1], fx * fy * d[2]
            cy, sy = math.cos(yaw_a), math.sin(yaw_a)
            bx = center[0] + cy * dx - sy * dy
            by = center[1] + sy * dx + cy * dy
            box = Box3D(bx, by, c.ground_z + c.anchor_size[2] / 2, *c.anchor_size, yaw_a + dyaw)
            if any(bev_iou(box, kept.box) > c.nms_iou for kept in dets):
                continue
            dets.append(Detection(box, logit))
            cache.append((k, i, j, fx, fy, idx, gext))
            if len(dets) == c.max_detections:
                break
        self._cache = (feats, cache, len(cloud))
        return dets

    def _anchor_nms(self, cand):
        c = self.config
        if not cand:
            return []
        cand = cand[: 50 * c.max_detections]
        xs, ys = c.grid().centers()
        l, w = c.anchor_size[0], c.anchor_size[1]
        boxes = []
        for _, k, i, j in cand:
            yaw = c.anchor_yaws[k]
            ex = abs(math.cos(yaw)) * l + abs(math.sin(yaw)) * w
            ey = abs(math.sin(yaw)) * l + abs(math.cos(yaw)) * w
            boxes.append((xs[i], ys[j], ex, ey))
        iou = _axis_aligned_iou_matrix(np.array(boxes))
        alive = np.ones(len(cand), dtype=bool)
        kept = []
        for a in range(len(cand)):
            if not alive[a]:
                continue
            kept.append(cand[a])
            if len(kept) == 4 * c.max_detections:
                break
            alive &= iou[a] <= c.pre_nms_iou
        return kept

    def backward(self, dlogit, dbox=None) -> np.ndarray:
        if self._cache is None:
            raise DetectorError("backward called before forward")
        feats, cache, n = self._cache
        dlogit, dbox = self._check_upstream(dlogit, dbox, len(cache))
        c = self.config
        w = self.weights
        nx, ny = c.grid().shape
        dfeat = [np.zeros((nx, ny, N_FEATURES)) for _ in c.anchor_yaws]
        out = np.zeros((n, 3))
        for (k, i, j, fx, fy, idx, gext), gl, gb in zip(cache, dlogit, dbox):
            yaw_a = c.anchor_yaws[k]
            cy, sy = math.cos(yaw_a), math.sin(yaw_a)
            ddelta = np.array([fx * (cy * gb[0] + sy * gb[1]), fy * (-sy * gb[0] + cy * gb[1]), fx * fy * gb[6]])
            dpsi = w.reg_w[k].T @ ddelta
            dphi = gl * w.cls_w[k] + dpsi[:N_FEATURES]
            dext = dpsi[N_FEATURES:]
            raw = feats.raw[k][i, j]
            dfeat[k][i, j] += dphi / w.feat_std / (1.0 + raw)
            if len(idx) and np.any(dext):
                out[idx] += np.einsum("k,knd->nd", dext, gext)
        if n:
            out += feats.backward(dfeat)
        return out
