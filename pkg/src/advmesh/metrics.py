"""Evaluation protocol: average precision, attack success rate and the
invisibility report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Box3D, Detection, box_iou
from .mesh import DeformationState, TriangleMesh, bev_area, l2_norm, laplacian_loss, signed_volume


class EvaluationError(ValueError):
    pass


def match_detections(scenes, iou_threshold: float = 0.7, mode: str = "3d"):
    """Greedy score-ordered matching pooled over scenes.

    Returns ``(scores, is_tp, n_gt)`` with detections sorted by descending
    score. Each detection claims its highest-IoU unmatched ground truth in
    its own scene; it is a true positive when that IoU reaches the threshold.
    """
    pool = []
    n_gt = 0
    for si, (dets, gts) in enumerate(scenes):
        n_gt += len(gts)
        for d in dets:
            pool.append((si, d))
    # stable sort keeps scene/emission order among equal scores
    order = sorted(range(len(pool)), key=lambda k: -pool[k][1].logit)
    taken = [np.zeros(len(g), dtype=bool) for _, g in scenes]
    scores, is_tp = [], []
    for k in order:
        si, det = pool[k]
        gts = scenes[si][1]
        best, best_j = -1.0, -1
        for j, gt in enumerate(gts):
            if taken[si][j]:
                continue
            iou = box_iou(det.box, gt, mode)
            if iou > best:
                best, best_j = iou, j
        tp = best_j >= 0 and best >= iou_threshold
        if tp:
            taken[si][best_j] = True
        scores.append(det.score)
        is_tp.append(tp)
    return np.array(scores), np.array(is_tp, dtype=bool), n_gt


def interpolated_ap(is_tp: np.ndarray, n_gt: int, n_points: int = 40) -> float:
    """Interpolated AP from a ranked TP/FP sequence.

    ``n_points=40`` samples recall at 1/40 ... 40/40; ``n_points=11`` uses
    0, 0.1, ..., 1.0.
    """
    if n_gt <= 0:
        raise EvaluationError("average precision is undefined with zero ground-truth boxes")
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if n_points == 40:
        samples = np.arange(1, 41) / 40.0
    elif n_points == 11:
        samples = np.linspace(0.0, 1.0, 11)
    else:
        raise ValueError("n_points must be 40 or 11")
    idx = np.searchsorted(recall, samples - 1e-12, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def average_precision(scenes: Sequence[tuple[Sequence[Detection], Sequence[Box3D]]],
                      iou_threshold: float = 0.7, mode: str = "3d", n_points: int = 40) -> float:
    """Single-class AP over pooled scenes (``mode`` is ``"3d"`` or ``"bev"``)."""
    scenes = [(list(d), list(g)) for d, g in scenes]
    _, is_tp, n_gt = match_detections(scenes, iou_threshold, mode)
    return interpolated_ap(is_tp, n_gt, n_points)


def attack_success_rate(p_o: float, p_a: float) -> float:
    """Relative precision drop ``(p_o - p_a) / p_o``; negative if detection improved."""
    if p_o == 0:
        raise EvaluationError("attack success rate is undefined for zero original precision")
    return (p_o - p_a) / p_o


@dataclass
class Invisibility:
    l2: float
    laplacian: float
    area_bev: float
    volume: float


def invisibility_report(state: DeformationState, mesh: TriangleMesh | None = None) -> Invisibility:
    """Modification magnitude, smoothness and size of a deformed object."""
    if mesh is None:
        mesh = TriangleMesh(state.local_vertices(), state.faces, validate=False)
    return Invisibility(
        l2=l2_norm(state),
        laplacian=laplacian_loss(mesh)[0],
        area_bev=bev_area(mesh),
        volume=signed_volume(mesh),
    )


REPORT_FIELDS = ("map_bev", "map_3d", "asr_bev", "asr_3d", "l2", "laplacian", "area_bev", "volume")


@dataclass
class EvalReport:
    """Precision of the clean and attacked scenes plus invisibility.

    ``p_o_*`` is the clean precision, ``p_a_*`` the precision with the
    evaluated mesh; ``map_*`` mirrors ``p_a_*``.
    """

    p_o_bev: float
    p_o_3d: float
    p_a_bev: float
    p_a_3d: float
    invisibility: Invisibility | None = None
    extra: dict = field(default_factory=dict)

    @property
    def map_bev(self) -> float:
        return self.p_a_bev

    @property
    def map_3d(self) -> float:
        return self.p_a_3d

    @property
    def asr_bev(self) -> float:
        return _safe_asr(self.p_o_bev, self.p_a_bev)

    @property
    def asr_3d(self) -> float:
        return _safe_asr(self.p_o_3d, self.p_a_3d)

    def as_dict(self) -> dict:
        inv = self.invisibility
        out = {
            "map_bev": self.map_bev, "map_3d": self.map_3d,
            "asr_bev": self.asr_bev, "asr_3d": self.asr_3d,
            "l2": inv.l2 if inv else None, "laplacian": inv.laplacian if inv else None,
            "area_bev": inv.area_bev if inv else None, "volume": inv.volume if inv else None,
            "p_o_bev": self.p_o_bev, "p_o_3d": self.p_o_3d,
        }
        out.update(self.extra)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        inv = None
        if d.get("l2") is not None:
            inv = Invisibility(d["l2"], d["laplacian"], d["area_bev"], d["volume"])
        known = set(REPORT_FIELDS) | {"p_o_bev", "p_o_3d"}
        return cls(d["p_o_bev"], d["p_o_3d"], d["map_bev"], d["map_3d"], inv,
                   {k: v for k, v in d.items() if k not in known})


def _safe_asr(p_o, p_a):
    return float("nan") if p_o == 0 else attack_success_rate(p_o, p_a)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(float(v))
    return "" if v is None else str(v)
