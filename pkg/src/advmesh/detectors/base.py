"""Detector contract shared by built-in and bridged detectors."""

from __future__ import annotations

import numpy as np

from ..boxes import Detection


class DetectorError(RuntimeError):
    """A detector failed or was used out of protocol."""


class Detector:
    """Forward maps a cloud (N, 3 or 4) to detections; backward maps
    per-detection upstream gradients to per-point xyz gradients (N, 3).

    ``backward`` refers to the most recent ``forward`` call.
    """

    name = "detector"
    differentiable = True
    has_box_regression = False
    stages = 1
    serial_only = False          # True when instances cannot be evaluated concurrently

    def forward(self, cloud: np.ndarray) -> list[Detection]:
        raise NotImplementedError

    def backward(self, dlogit, dbox=None) -> np.ndarray:
        raise NotImplementedError

    def capabilities(self) -> dict:
        return {"name": self.name, "differentiable": self.differentiable,
                "has_box_regression": self.has_box_regression, "stages": self.stages}

    def close(self):
        pass

    @staticmethod
    def _check_upstream(dlogit, dbox, n_det):
        dlogit = np.asarray(dlogit, dtype=float).reshape(-1)
        if len(dlogit) != n_det:
            raise DetectorError(f"backward got {len(dlogit)} logit gradients for {n_det} detections")
        if dbox is None:
            dbox = np.zeros((n_det, 7))
        dbox = np.asarray(dbox, dtype=float).reshape(-1, 7)
        if len(dbox) != n_det:
            raise DetectorError(f"backward got {len(dbox)} box gradients for {n_det} detections")
        return dlogit, dbox
