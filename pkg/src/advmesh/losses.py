"""Misdetection losses and the total attack objective.

A per-pair term is ``iou_term * score_term``. Each factor can be absent,
frozen (contributes its value, no gradient) or live. Score terms come as
the raw probability, the raw logit, or the barrier ``-log(1 - sigmoid(s))``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import Box3D, box_iou, sigmoid
from .mesh import TriangleMesh, laplacian_loss

logger = logging.getLogger(__name__)

IOU_FACTORS = ("absent", "frozen", "live")
SCORE_FACTORS = ("absent", "frozen_score", "live_score", "live_logit")
FORMS = ("log_barrier", "product")
STAGES = ("single", "S1", "S2")

SATURATION = 1e-12
# small enough to stay clear of nearby IoU kinks (coplanar faces, corner crossings); round-off ~1e-10
IOU_FD_STEP = 1e-6


@dataclass(frozen=True)
class LossSpec:
    iou_factor: str = "live"
    score_factor: str = "live_logit"
    form: str = "product"
    score_min: float = 0.1
    iou_min: float = 0.1
    iou_mode: str = "3d"
    lam: float = 0.001
    stage: str = "single"

    def __post_init__(self):
        if self.iou_factor not in IOU_FACTORS:
            raise ValueError(f"iou_factor must be one of {IOU_FACTORS}")
        if self.score_factor not in SCORE_FACTORS:
            raise ValueError(f"score_factor must be one of {SCORE_FACTORS}")
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.iou_mode not in ("3d", "bev"):
            raise ValueError("iou_mode must be '3d' or 'bev'")
        if self.iou_factor == "absent" and self.score_factor == "absent":
            raise ValueError("a loss needs at least one factor")
        if self.form == "log_barrier" and self.score_factor not in ("frozen_score", "live_score"):
            raise ValueError("log_barrier form needs a probability score factor")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "LossSpec":
        d = self.to_dict()
        d.update(kw)
        return LossSpec(**d)


PRESETS = {
    "ml_iou": LossSpec(iou_factor="live", score_factor="absent", form="product"),
    "ml_score_weighted": LossSpec(iou_factor="live", score_factor="frozen_score", form="product"),
    "mr_logitbar": LossSpec(iou_factor="absent", score_factor="live_score", form="log_barrier"),
    "mr_phyadv": LossSpec(iou_factor="frozen", score_factor="live_score", form="log_barrier"),
    "c_product": LossSpec(iou_factor="live", score_factor="live_score", form="product"),
    "c_barrier": LossSpec(iou_factor="live", score_factor="live_score", form="log_barrier"),
    "c_logit": LossSpec(iou_factor="live", score_factor="live_logit", form="product"),
}


def loss_preset(name: str, **overrides) -> LossSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown loss preset {name!r}; choose from {sorted(PRESETS)}") from None
    return spec.replace(**overrides) if overrides else spec


# --------------------------------------------------------------------------
# relevance


@dataclass(frozen=True)
class Pair:
    det: int
    gt: int
    iou: float


def relevance_filter(detections, gt_boxes, spec: LossSpec = LossSpec()) -> list[Pair]:
    """Detections with score > score_min whose best IoU with a GT exceeds iou_min."""
    pairs = []
    for d, det in enumerate(detections):
        if not det.score > spec.score_min or not gt_boxes:
            continue
        ious = [box_iou(det.box, g, spec.iou_mode) for g in gt_boxes]
        g = int(np.argmax(ious))
        if ious[g] > spec.iou_min:
            pairs.append(Pair(d, g, ious[g]))
    return pairs


# --------------------------------------------------------------------------
# per-pair terms


def score_term(logit: float, spec: LossSpec) -> tuple[float, float]:
    """Value and d/dlogit of the score factor (derivative 0 when frozen or absent)."""
    f = spec.score_factor
    if f == "absent":
        return 1.0, 0.0
    p = float(sigmoid(logit))
    if spec.form == "log_barrier":
        if p >= 1.0 - SATURATION:
            logger.warning("score %.15f saturates the log barrier; clamping", p)
            return -math.log(SATURATION), 0.0
        val = float(np.logaddexp(0.0, logit))         # -log(1 - sigmoid(s))
        return val, (p if f == "live_score" else 0.0)
    if f == "live_logit":
        return float(logit), 1.0
    return p, (p * (1.0 - p) if f == "live_score" else 0.0)


def iou_gradient(box: Box3D, gt: Box3D, mode: str = "3d", h: float = IOU_FD_STEP) -> np.ndarray:
    """Central-difference gradient of IoU w.r.t. (x, y, z, l, w, h, yaw)."""
    a = box.to_array()
    g = np.zeros(7)
    for k in range(7):
        hi, lo = a.copy(), a.copy()
        hi[k] += h
        lo[k] -= h
        g[k] = (box_iou(Box3D.from_array(hi), gt, mode) - box_iou(Box3D.from_array(lo), gt, mode)) / (2 * h)
    return g


def pair_terms(iou: float, logit: float, spec: LossSpec) -> tuple[float, float, float]:
    """(value, d/dIoU, d/dlogit) of one pair's term; frozen factors give exact zeros."""
    iv = 1.0 if spec.iou_factor == "absent" else float(iou)
    sv, ds = score_term(logit, spec)
    d_iou = sv if spec.iou_factor == "live" else 0.0
    return iv * sv, d_iou, iv * ds


@dataclass
class LossResult:
    value: float
    dlogit: np.ndarray
    dbox: np.ndarray
    pairs: list = field(default_factory=list)


def misdetection_loss(detections, gt_boxes, spec: LossSpec) -> LossResult:
    """Loss summed over relevant pairs plus per-detection upstream gradients."""
    n = len(detections)
    dlogit = np.zeros(n)
    dbox = np.zeros((n, 7))
    total = 0.0
    pairs = relevance_filter(detections, gt_boxes, spec)
    for p in pairs:
        det = detections[p.det]
        val, d_iou, d_logit = pair_terms(p.iou, det.logit, spec)
        total += val
        dlogit[p.det] += d_logit
        if d_iou != 0.0:
            dbox[p.det] += d_iou * iou_gradient(det.box, gt_boxes[p.gt], spec.iou_mode)
    return LossResult(total, dlogit, dbox, pairs)


def total_loss(misdetection: float, mesh: TriangleMesh, lam: float) -> tuple[float, np.ndarray]:
    """``misdetection + lam * laplacian``, with the Laplacian part's vertex gradient."""
    if lam == 0:
        return float(misdetection), np.zeros_like(mesh.vertices)
    phi, grad = laplacian_loss(mesh)
    return float(misdetection) + lam * phi, lam * grad
