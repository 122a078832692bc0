"""Axis-aligned box algebra: IoU, enclosing box, center distance and DIoU.

Boxes use the corner convention ``(x1, y1, x2, y2)`` with ``x2 >= x1`` and
``y2 >= y1``.  Scalar helpers accept anything indexable with four reals; the
array helpers work on ``(N, 4)`` float64 arrays and are what the hot loops
(assignment, losses, NMS) call.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def is_valid(self) -> bool:
        return self.x2 >= self.x1 and self.y2 >= self.y1


class DIoUBreakdown(NamedTuple):
    iou: float
    center_dist_sq: float
    enclose_diag_sq: float
    loss: float


def as_boxes(boxes) -> np.ndarray:
    """Coerce a box or a sequence of boxes to a float64 ``(N, 4)`` array."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        if arr.size == 0:
            return np.zeros((0, 4), dtype=np.float64)
        raise ValueError(f"expected boxes of shape (N, 4), got {arr.shape}")
    return arr


def box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def pairwise_iou(boxes1, boxes2) -> np.ndarray:
    """IoU matrix of shape ``(N, M)``.  Two zero-area boxes have IoU 0."""
    a = as_boxes(boxes1)
    b = as_boxes(boxes2)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def elementwise_iou(boxes1, boxes2) -> np.ndarray:
    """IoU of ``boxes1[i]`` with ``boxes2[i]`` for each row."""
    a = as_boxes(boxes1)
    b = as_boxes(boxes2)
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = box_area(a) + box_area(b) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(elementwise_iou(a, b)[0])


def enclosing_box(a: Sequence[float], b: Sequence[float]) -> Box:
    return Box(min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def center_distance_sq(a: Sequence[float], b: Sequence[float]) -> float:
    dx = (a[0] + a[2] - b[0] - b[2]) / 2
    dy = (a[1] + a[3] - b[1] - b[3]) / 2
    return dx * dx + dy * dy


def diou_terms(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise ``(iou, rho^2, c^2, loss)`` for DIoU = 1 - IoU + rho^2 / c^2."""
    p = as_boxes(pred)
    g = as_boxes(gt)
    ious = elementwise_iou(p, g)
    dxc = (p[:, 0] + p[:, 2] - g[:, 0] - g[:, 2]) / 2
    dyc = (p[:, 1] + p[:, 3] - g[:, 1] - g[:, 3]) / 2
    rho2 = dxc * dxc + dyc * dyc
    cw = np.maximum(p[:, 2], g[:, 2]) - np.minimum(p[:, 0], g[:, 0])
    ch = np.maximum(p[:, 3], g[:, 3]) - np.minimum(p[:, 1], g[:, 1])
    c2 = cw * cw + ch * ch
    loss = 1.0 - ious + rho2 / c2
    return ious, rho2, c2, loss


def diou_loss(pred: Sequence[float], gt: Sequence[float]) -> DIoUBreakdown:
    """DIoU loss of a single predicted box against a positive-area ground truth."""
    if not (gt[2] > gt[0] and gt[3] > gt[1]):
        raise ValueError(f"ground-truth box must have positive area, got {tuple(gt)}")
    i, r, c, l = diou_terms(pred, gt)
    return DIoUBreakdown(float(i[0]), float(r[0]), float(c[0]), float(l[0]))


def diou_loss_grad_batch(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise DIoU loss and its gradient w.r.t. the predicted corners.

    Returns ``(loss (N,), grad (N, 4))``.  At kinks of the min/max clamps the
    predicted coordinate is treated as the active argument, and an
    intersection of exactly zero width keeps its linear branch.
    """
    p = as_boxes(pred)
    g = as_boxes(gt)
    x1, y1, x2, y2 = p.T
    gx1, gy1, gx2, gy2 = g.T

    # intersection
    ax1 = (x1 >= gx1).astype(np.float64)
    ay1 = (y1 >= gy1).astype(np.float64)
    ax2 = (x2 <= gx2).astype(np.float64)
    ay2 = (y2 <= gy2).astype(np.float64)
    iw = np.minimum(x2, gx2) - np.maximum(x1, gx1)
    ih = np.minimum(y2, gy2) - np.maximum(y1, gy1)
    act_w = (iw >= 0).astype(np.float64)
    act_h = (ih >= 0).astype(np.float64)
    iw_c = np.clip(iw, 0.0, None)
    ih_c = np.clip(ih, 0.0, None)
    inter = iw_c * ih_c
    d_inter = np.stack(
        [
            -ih_c * ax1 * act_w,
            -iw_c * ay1 * act_h,
            ih_c * ax2 * act_w,
            iw_c * ay2 * act_h,
        ],
        axis=1,
    )

    pw = x2 - x1
    ph = y2 - y1
    d_area = np.stack([-ph, -pw, ph, pw], axis=1)
    union = pw * ph + (gx2 - gx1) * (gy2 - gy1) - inter
    safe_union = np.where(union > 0, union, 1.0)
    ious = np.where(union > 0, inter / safe_union, 0.0)
    d_union = d_area - d_inter
    d_iou = (d_inter * union[:, None] - inter[:, None] * d_union) / (safe_union**2)[:, None]
    d_iou[union <= 0] = 0.0

    # center distance
    dxc = (x1 + x2 - gx1 - gx2) / 2
    dyc = (y1 + y2 - gy1 - gy2) / 2
    rho2 = dxc * dxc + dyc * dyc
    d_rho2 = np.stack([dxc, dyc, dxc, dyc], axis=1)

    # enclosing diagonal
    cw = np.maximum(x2, gx2) - np.minimum(x1, gx1)
    ch = np.maximum(y2, gy2) - np.minimum(y1, gy1)
    c2 = cw * cw + ch * ch
    d_c2 = np.stack(
        [
            -2 * cw * (x1 <= gx1),
            -2 * ch * (y1 <= gy1),
            2 * cw * (x2 >= gx2),
            2 * ch * (y2 >= gy2),
        ],
        axis=1,
    )

    penalty = rho2 / c2
    d_penalty = (d_rho2 - penalty[:, None] * d_c2) / c2[:, None]
    loss = 1.0 - ious + penalty
    return loss, d_penalty - d_iou


def diou_loss_grad(pred: Sequence[float], gt: Sequence[float]) -> np.ndarray:
    """Gradient of the DIoU loss w.r.t. ``(x1, y1, x2, y2)`` of ``pred``."""
    return diou_loss_grad_batch(pred, gt)[1][0]


# Coordinate maps shared by augmentation and test-time augmentation.

def hflip_boxes(boxes, width: float) -> np.ndarray:
    """Mirror boxes about the vertical axis of an image ``width`` wide."""
    b = as_boxes(boxes)
    out = b.copy()
    out[:, 0] = width - b[:, 2]
    out[:, 2] = width - b[:, 0]
    return out


def scale_boxes(boxes, sx: float, sy: float | None = None) -> np.ndarray:
    sy = sx if sy is None else sy
    return as_boxes(boxes) * np.array([sx, sy, sx, sy])


def translate_boxes(boxes, dx: float, dy: float) -> np.ndarray:
    return as_boxes(boxes) + np.array([dx, dy, dx, dy])
