"""Differentiable soft BEV binning shared by the built-in detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def log_logistic(x):
    """log(sigmoid(x)) without overflow."""
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)


@dataclass(frozen=True)
class BevGrid:
    """Regular xy grid; points spread onto cells with a tent kernel.

    With ``bandwidth == cell`` this is ordinary bilinear splatting onto cell
    centers. The kernel is a partition of unity whenever ``bandwidth`` is an
    integer multiple of ``cell``.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float
    bandwidth: float

    def __post_init__(self):
        if self.cell <= 0 or self.bandwidth <= 0:
            raise ValueError("cell size and bandwidth must be positive")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("empty grid extent")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(round((self.x_max - self.x_min) / self.cell)),
                int(round((self.y_max - self.y_min) / self.cell)))

    def centers(self):
        nx, ny = self.shape
        return (self.x_min + (np.arange(nx) + 0.5) * self.cell,
                self.y_min + (np.arange(ny) + 0.5) * self.cell)

    def splat_weights(self, xy: np.ndarray):
        """Per point, the touched cells with weights and weight gradients.

        Returns ``(flat_index, w, dw_dx, dw_dy)`` each of shape (N, K) with
        out-of-grid entries given zero weight and index 0.
        """
        nx, ny = self.shape
        s, h = self.cell, self.bandwidth
        k = int(math.ceil(h / s))
        gx = (xy[:, 0] - self.x_min) / s - 0.5
        gy = (xy[:, 1] - self.y_min) / s - 0.5
        bx = np.floor(gx).astype(np.int64)
        by = np.floor(gy).astype(np.int64)
        offs = np.arange(-k + 1, k + 1)
        ix = bx[:, None] + offs[None, :]
        iy = by[:, None] + offs[None, :]
        dx = (gx[:, None] - ix) * s
        dy = (gy[:, None] - iy) * s
        wx = np.clip(1.0 - np.abs(dx) / h, 0.0, None) * (s / h)
        wy = np.clip(1.0 - np.abs(dy) / h, 0.0, None) * (s / h)
        gwx = np.where(np.abs(dx) < h, -np.sign(dx) / h * (s / h), 0.0)
        gwy = np.where(np.abs(dy) < h, -np.sign(dy) / h * (s / h), 0.0)
        okx = (ix >= 0) & (ix < nx)
        oky = (iy >= 0) & (iy < ny)
        wx, gwx = wx * okx, gwx * okx
        wy, gwy = wy * oky, gwy * oky
        n, kk = len(xy), len(offs) ** 2
        flat = (np.clip(ix, 0, nx - 1)[:, :, None] * ny + np.clip(iy, 0, ny - 1)[:, None, :]).reshape(n, kk)
        w = (wx[:, :, None] * wy[:, None, :]).reshape(n, kk)
        dwdx = (gwx[:, :, None] * wy[:, None, :]).reshape(n, kk)
        dwdy = (wx[:, :, None] * gwy[:, None, :]).reshape(n, kk)
        return flat, w, dwdx, dwdy

    def splat(self, flat, w, mass) -> np.ndarray:
        nx, ny = self.shape
        grid = np.bincount(flat.ravel(), weights=(w * mass[:, None]).ravel(), minlength=nx * ny)
        return grid.reshape(nx, ny)


def window_sum(grid: np.ndarray, x0: int, x1: int, y0: int, y1: int) -> np.ndarray:
    """``out[i, j] = sum(grid[i+x0 : i+x1+1, j+y0 : j+y1+1])`` with zero padding.

    The adjoint is ``window_sum(g, -x1, -x0, -y1, -y0)``.
    """
    nx, ny = grid.shape
    c = np.zeros((nx + 1, ny + 1))
    c[1:, 1:] = grid.cumsum(0).cumsum(1)
    i = np.arange(nx)
    j = np.arange(ny)
    i0 = np.clip(i + x0, 0, nx)[:, None]
    i1 = np.clip(i + x1 + 1, 0, nx)[:, None]
    j0 = np.clip(j + y0, 0, ny)[None, :]
    j1 = np.clip(j + y1 + 1, 0, ny)[None, :]
    return c[i1, j1] - c[i0, j1] - c[i1, j0] + c[i0, j0]


def box_sum(grid: np.ndarray, hx: int, hy: int) -> np.ndarray:
    """Sum over the (2hx+1) x (2hy+1) window centered on every cell (zero padded).

    The window is symmetric, so this operator is its own adjoint.
    """
    return window_sum(grid, -hx, hx, -hy, hy)


def soft_band(z_rel, lo, hi, width):
    """Smooth indicator of ``lo < z < hi`` and its derivative in z."""
    a = logistic((z_rel - lo) / width)
    b = logistic((hi - z_rel) / width)
    val = a * b
    grad = (a * (1 - a) * b - a * b * (1 - b)) / width
    return val, grad


def soft_above(z_rel, lo, width):
    a = logistic((z_rel - lo) / width)
    return a, a * (1 - a) / width
