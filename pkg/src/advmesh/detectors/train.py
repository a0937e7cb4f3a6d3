"""Fitting the pillar detector on labelled scenes."""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.optimize import minimize

from ..boxes import wrap_angle
from .grid import logistic
from .pillar import (N_EXTENTS, N_FEATURES, AnchorFeatures, PillarConfig, PillarDetector, PillarWeights,
                     _body_points, _local_points, soft_extents)

logger = logging.getLogger(__name__)


def _anchor_extents(config: PillarConfig, k: int):
    l, w = config.anchor_size[0], config.anchor_size[1]
    yaw = config.anchor_yaws[k]
    return (abs(math.cos(yaw)) * l + abs(math.sin(yaw)) * w,
            abs(math.sin(yaw)) * l + abs(math.cos(yaw)) * w)


def _aabb(box):
    c, s = abs(math.cos(box.yaw)), abs(math.sin(box.yaw))
    return (box.x, box.y, c * box.l + s * box.w, s * box.l + c * box.w)


def anchor_ious(config: PillarConfig, k: int, boxes) -> np.ndarray:
    """(nx, ny, n_boxes) BEV IoU of yaw-k anchors with the boxes' axis-aligned hulls."""
    xs, ys = config.grid().centers()
    ex, ey = _anchor_extents(config, k)
    out = np.zeros((len(xs), len(ys), len(boxes)))
    for b, box in enumerate(boxes):
        bx, by, bex, bey = _aabb(box)
        ix = np.clip(np.minimum(xs + ex / 2, bx + bex / 2) - np.maximum(xs - ex / 2, bx - bex / 2), 0, None)
        iy = np.clip(np.minimum(ys + ey / 2, by + bey / 2) - np.maximum(ys - ey / 2, by - bey / 2), 0, None)
        inter = ix[:, None] * iy[None, :]
        out[:, :, b] = inter / (ex * ey + bex * bey - inter)
    return out


def collect_samples(config: PillarConfig, scenes, rng: np.random.Generator,
                    pos_iou=0.6, neg_iou=0.35, reg_iou=0.45, n_random=300, n_near=600, n_reg=40):
    """Gather classifier and offset-head samples from ``SceneSample`` objects.

    Returns per anchor yaw ``(X, y, R, T)``: raw classifier features and
    labels, raw offset-head inputs (features then extents) and canonical
    offset targets.
    """
    K = len(config.anchor_yaws)
    X, y, R, T = ([[] for _ in range(K)] for _ in range(4))
    xs, ys = config.grid().centers()
    for scene in scenes:
        feats = AnchorFeatures(config, scene.cloud)
        objects = list(scene.gt_boxes) + list(scene.distractors)
        body = _body_points(scene.cloud, config)
        for k in range(K):
            raw = feats.raw[k]
            iou_gt = anchor_ious(config, k, scene.gt_boxes)
            best = iou_gt.max(axis=2) if iou_gt.shape[2] else np.zeros(raw.shape[:2])
            near = np.zeros(raw.shape[:2], dtype=bool)
            for o in objects:
                near |= (np.abs(xs - o.x)[:, None] < 6) & (np.abs(ys - o.y)[None, :] < 6)
            neg = best < neg_iou
            groups = [(best >= pos_iou, None, 1.0), (near & neg, n_near, 0.0),
                      (neg & ~near & (raw[..., 0] > 0.5), n_random, 0.0),    # cluttered background
                      (neg & ~near, n_random, 0.0)]                          # anywhere
            for mask, cap, label in groups:
                ii, jj = np.nonzero(mask)
                if cap is not None and len(ii) > cap:
                    sel = rng.choice(len(ii), cap, replace=False)
                    ii, jj = ii[sel], jj[sel]
                X[k].append(raw[ii, jj])
                y[k].append(np.full(len(ii), label))
            ri, rj = np.nonzero(best >= reg_iou)
            if len(ri) > n_reg:
                sel = rng.choice(len(ri), n_reg, replace=False)
                ri, rj = ri[sel], rj[sel]
            yaw_a = config.anchor_yaws[k]
            ca, sa = math.cos(yaw_a), math.sin(yaw_a)
            sx, sy = feats.signs[k]
            for i, j in zip(ri, rj):
                gt = scene.gt_boxes[int(np.argmax(iou_gt[i, j]))]
                center = np.array([xs[i], ys[j]])
                fx, fy = int(sx[i, j]), int(sy[i, j])
                idx = body[_local_points(scene.cloud[body], center, config)]
                ext, _ = soft_extents(scene.cloud[idx], center, yaw_a, config, fx, fy)
                dx, dy = gt.x - center[0], gt.y - center[1]
                dyaw = wrap_angle(2 * (gt.yaw - yaw_a)) / 2     # boxes are symmetric under pi
                R[k].append(np.concatenate([raw[i, j], ext]))
                T[k].append([fx * (ca * dx + sa * dy), fy * (-sa * dx + ca * dy), fx * fy * dyaw])
    out = []
    for k in range(K):
        out.append((np.concatenate(X[k]) if X[k] else np.zeros((0, N_FEATURES)),
                    np.concatenate(y[k]) if y[k] else np.zeros(0),
                    np.array(R[k]).reshape(-1, N_FEATURES + N_EXTENTS),
                    np.array(T[k]).reshape(-1, 3)))
    return out


def cross_entropy(phi: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, l2: float = 0.0):
    """Class-balanced logistic loss and its gradient in (w, b)."""
    npos = max(float(y.sum()), 1.0)
    nneg = max(len(y) - float(y.sum()), 1.0)
    sw = np.where(y > 0, 0.5 / npos, 0.5 / nneg)
    s = 2 * y - 1
    z = s * (phi @ w + b)
    loss = float(np.sum(sw * np.logaddexp(0, -z)) + 0.5 * l2 * w @ w)
    g = -sw * s * logistic(-z)
    return loss, phi.T @ g + l2 * w, float(g.sum())


def fit_classifier(phi, y, w0, b0, epochs: int, rate: float, momentum: float = 0.9, l2: float = 1e-4):
    """Full-batch gradient descent (heavy-ball momentum) on the cross-entropy."""
    w, b = np.array(w0, dtype=float), float(b0)
    vw, vb = np.zeros_like(w), 0.0
    for _ in range(epochs):
        _, gw, gb = cross_entropy(phi, y, w, b, l2)
        vw = momentum * vw - rate * gw
        vb = momentum * vb - rate * gb
        w, b = w + vw, b + vb
    return w, b


def smooth_l1(r, beta):
    a = np.abs(r)
    return np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta), np.where(a < beta, r / beta, np.sign(r))


def fit_regressor(psi: np.ndarray, targets: np.ndarray, epochs: int, beta: float = 0.1, l2: float = 1e-6):
    """Linear offset head: least-squares start, then smooth-L1 refinement."""
    A = np.hstack([psi, np.ones((len(psi), 1))])
    W = np.zeros((targets.shape[1], psi.shape[1]))
    b = np.zeros(targets.shape[1])
    if epochs <= 0 or len(psi) == 0:
        return W, b
    for o in range(targets.shape[1]):
        t = targets[:, o]
        theta0 = np.linalg.lstsq(A, t, rcond=None)[0]

        def f(theta):
            val, d = smooth_l1(A @ theta - t, beta)
            gr = A.T @ d / len(t)
            gr[:-1] += l2 * theta[:-1]
            return val.mean() + 0.5 * l2 * theta[:-1] @ theta[:-1], gr

        theta = minimize(f, theta0, jac=True, method="L-BFGS-B", options={"maxiter": epochs}).x
        W[o], b[o] = theta[:-1], theta[-1]
    return W, b


def train_pillar(scenes, epochs: int = 500, rate: float = 0.5, config: PillarConfig | None = None,
                 seed: int = 0, weights: PillarWeights | None = None) -> PillarDetector:
    """Fit the pillar detector by gradient descent.

    Every anchor yaw gets its own classifier and offset head; all share the
    feature standardization. ``epochs = 0`` returns the initial weights.
    """
    config = config or PillarConfig()
    K = len(config.anchor_yaws)
    init = weights.copy() if weights is not None else PillarWeights.initial(K)
    samples = collect_samples(config, scenes, np.random.default_rng(seed))
    for k, (_, y, _, _) in enumerate(samples):
        if y.all() or not y.any():
            raise ValueError(f"anchor yaw {config.anchor_yaws[k]:.3f} needs both positive and "
                             "negative training anchors")
    if epochs <= 0:
        return PillarDetector(config, init)
    L = np.log1p(np.concatenate([X for X, _, _, _ in samples]))
    mean, std = L.mean(axis=0), L.std(axis=0) + 1e-6
    out = PillarWeights(mean, std, init.cls_w, init.cls_b, init.reg_w, init.reg_b)
    for k, (X, y, R, T) in enumerate(samples):
        phi = (np.log1p(X) - mean) / std
        out.cls_w[k], out.cls_b[k] = fit_classifier(phi, y, init.cls_w[k], init.cls_b[k], epochs, rate)
        psi = np.hstack([(np.log1p(R[:, :N_FEATURES]) - mean) / std, R[:, N_FEATURES:]])
        out.reg_w[k], out.reg_b[k] = fit_regressor(psi, T, epochs)
        logger.info("pillar fit yaw %d: %d cls samples (%d pos), %d offset samples, cross-entropy %.4f",
                    k, len(y), int(y.sum()), len(T), cross_entropy(phi, y, out.cls_w[k], out.cls_b[k])[0])
    return PillarDetector(config, out)
