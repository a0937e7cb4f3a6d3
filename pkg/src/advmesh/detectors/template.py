"""Analytic weight-free BEV template detector.

Every anchor (cell center x yaw in {0, pi/2}) scores

    logit = w_body * (body-band mass under footprint)
          + w_above * (above-roof mass under footprint) + bias

where mass is soft-binned point count. A negative ``w_above`` makes
mass above the roof height suppress the car score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..boxes import Box3D, Detection
from .base import Detector, DetectorError
from .grid import BevGrid, box_sum, soft_above, soft_band

BAND_WIDTH = 0.05


@dataclass(frozen=True)
class TemplateDetectorConfig:
    x_range: tuple[float, float] = (0.0, 40.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    cell: float = 0.2
    bandwidth: float = 0.2
    anchor_size: tuple[float, float, float] = (4.0, 1.7, 1.5)
    anchor_yaws: tuple[float, ...] = (0.0, math.pi / 2)
    ground_z: float = -1.73
    body_floor: float = 0.25     # above ground; keeps ground returns out of the body band
    roof_height: float = 1.6     # above ground
    w_body: float = 0.02
    w_above: float = -0.08
    bias: float = -4.0
    emit_threshold: float = 0.05

    def __post_init__(self):
        if self.cell <= 0 or self.bandwidth <= 0:
            raise ValueError("cell size and bandwidth must be positive")

    def grid(self) -> BevGrid:
        return BevGrid(self.x_range[0], self.x_range[1], self.y_range[0], self.y_range[1],
                       self.cell, self.bandwidth)

    def half_cells(self, yaw: float) -> tuple[int, int]:
        """Window half-sizes (cells) covering cell centers inside the footprint."""
        l, w = self.anchor_size[0], self.anchor_size[1]
        ex = abs(math.cos(yaw)) * l + abs(math.sin(yaw)) * w
        ey = abs(math.sin(yaw)) * l + abs(math.cos(yaw)) * w
        return int(math.floor(ex / (2 * self.cell) + 1e-9)), int(math.floor(ey / (2 * self.cell) + 1e-9))


class BandFeatures:
    """Soft-binned band masses for a cloud, with enough state for backprop."""

    def __init__(self, grid: BevGrid, cloud: np.ndarray, bands):
        """``bands`` is a list of callables z_rel -> (value, dvalue/dz)."""
        self.grid = grid
        self.n = len(cloud)
        self.xy = cloud[:, :2]
        z = cloud[:, 2]
        self.flat, self.w, self.dwdx, self.dwdy = grid.splat_weights(self.xy)
        self.mass, self.dmass = [], []
        self.grids = []
        for band in bands:
            m, dm = band(z)
            self.mass.append(m)
            self.dmass.append(dm)
            self.grids.append(grid.splat(self.flat, self.w, m))

    def backward(self, cell_grads) -> np.ndarray:
        """Point gradients from d(loss)/d(cell mass) for each band grid."""
        out = np.zeros((self.n, 3))
        for g, m, dm in zip(cell_grads, self.mass, self.dmass):
            if g is None:
                continue
            gc = g.ravel()[self.flat]                   # (N, K)
            out[:, 0] += m * np.sum(gc * self.dwdx, axis=1)
            out[:, 1] += m * np.sum(gc * self.dwdy, axis=1)
            out[:, 2] += dm * np.sum(gc * self.w, axis=1)
        return out


class TemplateDetector(Detector):
    name = "template"
    differentiable = True
    has_box_regression = False
    stages = 1

    def __init__(self, config: TemplateDetectorConfig | None = None):
        self.config = config or TemplateDetectorConfig()
        self._cache = None

    def _bands(self):
        c = self.config
        return [
            lambda z: soft_band(z - c.ground_z, c.body_floor, c.roof_height, BAND_WIDTH),
            lambda z: soft_above(z - c.ground_z, c.roof_height, BAND_WIDTH),
        ]

    def logits(self, cloud: np.ndarray):
        """Logit maps, one (nx, ny) array per anchor yaw, and the band features."""
        c = self.config
        cloud = np.asarray(cloud, dtype=float)
        feats = BandFeatures(c.grid(), cloud, self._bands())
        maps = []
        for yaw in c.anchor_yaws:
            hx, hy = c.half_cells(yaw)
            maps.append(c.w_body * box_sum(feats.grids[0], hx, hy)
                        + c.w_above * box_sum(feats.grids[1], hx, hy) + c.bias)
        return maps, feats

    def forward(self, cloud: np.ndarray) -> list[Detection]:
        c = self.config
        cloud = np.asarray(cloud, dtype=float).reshape(len(cloud), -1) if len(cloud) else np.zeros((0, 4))
        maps, feats = self.logits(cloud)
        xs, ys = c.grid().centers()
        thr = math.log(c.emit_threshold / (1 - c.emit_threshold))
        dets, index = [], []
        zc = c.ground_z + c.anchor_size[2] / 2
        for k, (yaw, m) in enumerate(zip(c.anchor_yaws, maps)):
            ii, jj = np.nonzero(m > thr)
            for i, j in zip(ii, jj):
                box = Box3D(xs[i], ys[j], zc, *c.anchor_size, yaw)
                dets.append(Detection(box, float(m[i, j])))
                index.append((k, i, j))
        self._cache = (feats, index, len(cloud))
        return dets

    def backward(self, dlogit, dbox=None) -> np.ndarray:
        if self._cache is None:
            raise DetectorError("backward called before forward")
        feats, index, n = self._cache
        dlogit, _ = self._check_upstream(dlogit, dbox, len(index))
        c = self.config
        nx, ny = c.grid().shape
        gb = np.zeros((nx, ny))
        ga = np.zeros((nx, ny))
        for k, yaw in enumerate(c.anchor_yaws):
            gmap = np.zeros((nx, ny))
            for (kk, i, j), g in zip(index, dlogit):
                if kk == k:
                    gmap[i, j] += g
            if not gmap.any():
                continue
            hx, hy = c.half_cells(yaw)
            adj = box_sum(gmap, hx, hy)
            gb += c.w_body * adj
            ga += c.w_above * adj
        if n == 0:
            return np.zeros((0, 3))
        return feats.backward([gb, ga])
