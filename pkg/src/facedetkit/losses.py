"""Focal, DIoU and soft-target IoU losses with analytic gradients.

Head outputs are logits; every gradient here is taken with respect to the
pre-sigmoid value (classification, IoU) or the raw box deltas (regression).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .assigner import AssignResult
from .geometry import Box, as_boxes, diou_loss_grad_batch, elementwise_iou

EPS = 1e-12
# dw, dh ceiling: a 16 px anchor may grow to at most 1000 px
MAX_DELTA_WH = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    reg: float = 1.0
    iou: float = 1.0


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1 - EPS)
    return np.log(p) - np.log1p(-p)


def focal_loss_logits(z, target, cfg: FocalConfig = FocalConfig()):
    """Element-wise focal loss and d loss / d logit for binary targets."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(target).astype(bool)
    p = sigmoid(z)
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    q = 1.0 - p
    g, a = cfg.gamma, cfg.alpha
    loss = np.where(t, -a * q**g * log_p, -(1 - a) * p**g * log_q)
    grad = np.where(t, a * q**g * (g * p * log_p - q), (1 - a) * p**g * (p - g * q * log_q))
    return loss, grad


def focal_loss(prob: float, target: int, cfg: FocalConfig = FocalConfig()) -> tuple[float, float]:
    """Focal loss of one probability; probabilities are clamped to [EPS, 1 - EPS]."""
    p = min(max(float(prob), EPS), 1 - EPS)
    q = 1.0 - p
    g, a = cfg.gamma, cfg.alpha
    if target:
        loss = -a * q**g * math.log(p)
        grad = a * q**g * (g * p * math.log(p) - q)
    else:
        loss = -(1 - a) * p**g * math.log(q)
        grad = (1 - a) * p**g * (p - g * q * math.log(q))
    return loss, grad


def bce_iou_loss_logits(z, target):
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    loss = t * np.logaddexp(0.0, -z) + (1 - t) * np.logaddexp(0.0, z)
    return loss, sigmoid(z) - t


def bce_iou_loss(pred_iou: float, target_iou: float) -> tuple[float, float]:
    """Soft-target binary cross-entropy; gradient w.r.t. the logit is ``p - t``."""
    p = min(max(float(pred_iou), EPS), 1 - EPS)
    t = float(target_iou)
    loss = -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return loss, p - t


def decode_deltas_batch(anchors, deltas) -> tuple[np.ndarray, np.ndarray]:
    """Decode ``(dx, dy, dw, dh)`` against anchors.

    Returns ``(boxes (N, 4), jacobian (N, 4, 4))`` with
    ``jacobian[n, i, j] = d box[n, i] / d delta[n, j]``.
    """
    a = as_boxes(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    dw = np.minimum(d[:, 2], MAX_DELTA_WH)
    dh = np.minimum(d[:, 3], MAX_DELTA_WH)
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)

    hw = 0.5 * w * (d[:, 2] <= MAX_DELTA_WH)
    hh = 0.5 * h * (d[:, 3] <= MAX_DELTA_WH)
    jac = np.zeros((len(a), 4, 4))
    jac[:, 0, 0] = aw
    jac[:, 2, 0] = aw
    jac[:, 1, 1] = ah
    jac[:, 3, 1] = ah
    jac[:, 0, 2] = -hw
    jac[:, 2, 2] = hw
    jac[:, 1, 3] = -hh
    jac[:, 3, 3] = hh
    return boxes, jac


def decode_deltas(anchor: Sequence[float], deltas: Sequence[float]) -> tuple[Box, np.ndarray]:
    boxes, jac = decode_deltas_batch(anchor, deltas)
    return Box(*map(float, boxes[0])), jac[0]


def encode_deltas(anchors, boxes) -> np.ndarray:
    """Inverse of decoding (ignores the dw/dh ceiling)."""
    a = as_boxes(anchors)
    b = as_boxes(boxes)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    bw = b[:, 2] - b[:, 0]
    bh = b[:, 3] - b[:, 1]
    dx = ((b[:, 0] + b[:, 2]) - (a[:, 0] + a[:, 2])) / 2 / aw
    dy = ((b[:, 1] + b[:, 3]) - (a[:, 1] + a[:, 3])) / 2 / ah
    return np.stack([dx, dy, np.log(bw / aw), np.log(bh / ah)], axis=1)


@dataclass
class LossBundle:
    cls_loss: float
    reg_loss: float
    iou_loss: float
    total: float
    num_positives: int
    grad_cls: np.ndarray  # (A,) d total / d cls logit
    grad_deltas: np.ndarray  # (A, 4)
    grad_iou: np.ndarray  # (A,) d total / d iou logit
    iou_targets: np.ndarray  # (P,) detached targets used for the IoU head


def total_loss(
    assign: AssignResult,
    cls_logits,
    deltas,
    iou_logits,
    anchors,
    gts,
    focal: FocalConfig = FocalConfig(),
    weights: LossWeights = LossWeights(),
    iou_targets=None,
) -> LossBundle:
    """Classification + regression + IoU-prediction loss for one image.

    Classification runs over every anchor and is normalized by
    ``max(num_positives, 1)``; regression and IoU losses are means over
    positives.  The IoU head target is IoU(decoded box, matched gt) with no
    gradient flowing through it; pass ``iou_targets`` (one per positive, in
    anchor order) to pin them explicitly.
    """
    anchors = as_boxes(anchors)
    gts = as_boxes(gts)
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    iou_logits = np.asarray(iou_logits, dtype=np.float64)
    n = len(anchors)
    if not (len(cls_logits) == len(deltas) == len(iou_logits) == len(assign.labels) == n):
        raise ValueError("head outputs, labels and anchors must have one entry per anchor")

    pos = np.flatnonzero(assign.labels >= 0)
    npos = len(pos)
    norm = max(npos, 1)

    cls_each, cls_grad = focal_loss_logits(cls_logits, assign.labels >= 0, focal)
    cls_loss = float(np.sum(cls_each)) / norm
    grad_cls = weights.cls * cls_grad / norm

    grad_deltas = np.zeros_like(deltas)
    grad_iou = np.zeros(n)
    reg_loss = 0.0
    iou_loss = 0.0
    targets = np.zeros(0)
    if npos:
        matched = gts[assign.labels[pos]]
        boxes, jac = decode_deltas_batch(anchors[pos], deltas[pos])
        reg_each, box_grad = diou_loss_grad_batch(boxes, matched)
        reg_loss = float(np.sum(reg_each)) / npos
        grad_deltas[pos] = weights.reg * np.einsum("ni,nij->nj", box_grad, jac) / npos

        if iou_targets is None:
            targets = elementwise_iou(boxes, matched)
        else:
            targets = np.asarray(iou_targets, dtype=np.float64)
        iou_each, iou_grad = bce_iou_loss_logits(iou_logits[pos], targets)
        iou_loss = float(np.sum(iou_each)) / npos
        grad_iou[pos] = weights.iou * iou_grad / npos

    total = weights.cls * cls_loss + weights.reg * reg_loss + weights.iou * iou_loss
    return LossBundle(cls_loss, reg_loss, iou_loss, total, npos, grad_cls, grad_deltas, grad_iou, targets)
