"""Inference-side pipeline: score fusion, NMS, box voting and TTA merging."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, as_boxes, hflip_boxes, pairwise_iou, scale_boxes, translate_boxes


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class Detection:
    box: Box
    cls_score: float
    pred_iou: float
    fused_score: float

    @classmethod
    def fused(cls, box, cls_score: float, pred_iou: float, cfg: FusionConfig = FusionConfig()) -> "Detection":
        return cls(Box(*map(float, box)), float(cls_score), float(pred_iou), fuse_score(cls_score, pred_iou, cfg))

    @classmethod
    def scored(cls, box, score: float) -> "Detection":
        """A detection whose only score is ``score`` (e.g. read from a file)."""
        s = float(score)
        return cls(Box(*map(float, box)), s, s, s)


def fuse_score(cls_score: float, pred_iou: float, cfg: FusionConfig | float = FusionConfig()) -> float:
    """``cls_score ** alpha * pred_iou ** (1 - alpha)``, with ``0 ** 0 == 1``."""
    alpha = cfg.alpha if isinstance(cfg, FusionConfig) else float(cfg)
    return float(cls_score) ** alpha * float(pred_iou) ** (1.0 - alpha)


def fuse_scores(cls_scores, pred_ious, alpha: float = 0.5) -> np.ndarray:
    return np.power(np.asarray(cls_scores, float), alpha) * np.power(np.asarray(pred_ious, float), 1.0 - alpha)


def to_arrays(dets: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if not dets:
        z = np.zeros(0)
        return np.zeros((0, 4)), z, z.copy(), z.copy()
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    return (
        boxes,
        np.array([d.cls_score for d in dets]),
        np.array([d.pred_iou for d in dets]),
        np.array([d.fused_score for d in dets]),
    )


def nms_indices(boxes, scores, iou_thr: float) -> np.ndarray:
    """Greedy NMS on arrays; returns kept indices in descending-score order.

    Ties on score keep input order.  A candidate is suppressed when its IoU
    with some kept box is strictly greater than ``iou_thr``.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        w = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        h = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = w * h
        union = areas[i] + areas[rest] - inter
        ovr = np.zeros_like(inter)
        np.divide(inter, union, out=ovr, where=union > 0)
        order = rest[ovr <= iou_thr]
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thr: float) -> list[Detection]:
    if not dets:
        return []
    boxes, _, _, fused = to_arrays(dets)
    return [dets[i] for i in nms_indices(boxes, fused, iou_thr)]


def vote_boxes(kept_boxes, pool_boxes, pool_weights, vote_iou_thr: float) -> np.ndarray:
    """Weighted-average each kept box over pool boxes with IoU >= threshold.

    The average is taken as an offset from the kept box, so a cluster of
    coincident boxes returns the kept coordinates bit for bit.  Sums are
    exactly rounded (``math.fsum``) and do not depend on pool order.
    """
    kept_boxes = as_boxes(kept_boxes)
    pool_boxes = as_boxes(pool_boxes)
    weights = np.asarray(pool_weights, dtype=np.float64)
    out = kept_boxes.copy()
    if len(kept_boxes) == 0 or len(pool_boxes) == 0:
        return out
    overlaps = pairwise_iou(kept_boxes, pool_boxes)
    for k in range(len(kept_boxes)):
        members = np.flatnonzero(overlaps[k] >= vote_iou_thr)
        w = weights[members]
        total = math.fsum(w)
        if total <= 0:
            continue
        for c in range(4):
            ref = kept_boxes[k, c]
            out[k, c] = ref + math.fsum(w * (pool_boxes[members, c] - ref)) / total
    return out


def box_vote(kept: Sequence[Detection], pool: Sequence[Detection], vote_iou_thr: float) -> list[Detection]:
    """Replace kept coordinates by the fused-score-weighted cluster average."""
    if not kept:
        return []
    kb = to_arrays(kept)[0]
    pb, _, _, pw = to_arrays(pool)
    voted = vote_boxes(kb, pb, pw, vote_iou_thr)
    return [replace(d, box=Box(*map(float, b))) for d, b in zip(kept, voted)]


@dataclass(frozen=True)
class TTAVariant:
    scale: float = 1.0
    shift: tuple[int, int] = (0, 0)
    flip: bool = False


@dataclass(frozen=True)
class TTAMap:
    """Coordinate map from an original image into one augmented variant.

    Forward is scale, then translate by ``shift * shift_pixels`` (the canvas
    grows by the same amount), then an optional mirror about the variant
    width.
    """

    image_w: float
    image_h: float
    variant: TTAVariant
    shift_pixels: float = 32

    @property
    def offset(self) -> tuple[float, float]:
        return (self.variant.shift[0] * self.shift_pixels, self.variant.shift[1] * self.shift_pixels)

    @property
    def variant_size(self) -> tuple[float, float]:
        ox, oy = self.offset
        return (self.image_w * self.variant.scale + ox, self.image_h * self.variant.scale + oy)

    def forward(self, boxes) -> np.ndarray:
        out = translate_boxes(scale_boxes(boxes, self.variant.scale), *self.offset)
        if self.variant.flip:
            out = hflip_boxes(out, self.variant_size[0])
        return out

    def inverse(self, boxes) -> np.ndarray:
        out = as_boxes(boxes)
        if self.variant.flip:
            out = hflip_boxes(out, self.variant_size[0])
        ox, oy = self.offset
        return translate_boxes(out, -ox, -oy) / self.variant.scale


def tta_transform(image_w: float, image_h: float, variant: TTAVariant, shift_pixels: float = 32) -> TTAMap:
    if variant.scale <= 0:
        raise ValueError("variant scale must be positive")
    return TTAMap(float(image_w), float(image_h), variant, shift_pixels)


@dataclass(frozen=True)
class TTAPlan:
    short_edges: tuple[int, ...] = (500, 800, 1100, 1400, 1700)
    shift_directions: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (1, 1))
    shift_pixels: int = 32
    hflip: bool = True
    nms_iou_thr: float = 0.5
    vote_iou_thr: float = 0.5
    score_thr: float = 0.0

    def __post_init__(self):
        if any(s <= 0 for s in self.short_edges):
            raise ValueError("short edges must be positive")
        if any(v not in (0, 1) for d in self.shift_directions for v in d):
            raise ValueError("shift multipliers must be 0 or 1")

    def variants(self, image_w: int, image_h: int) -> list[TTAVariant]:
        short = min(image_w, image_h)
        flips = (False, True) if self.hflip else (False,)
        return [
            TTAVariant(edge / short, tuple(d), f)
            for edge in self.short_edges
            for d in self.shift_directions
            for f in flips
        ]


def _canonical_order(boxes, cls, ious, fused) -> np.ndarray:
    # descending scores, then coordinates: independent of how the pool was built
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -ious, -cls, -fused))


def merge_tta(
    per_variant: Iterable[tuple[TTAVariant, Sequence[Detection]]],
    plan: TTAPlan,
    image_w: float,
    image_h: float,
) -> list[Detection]:
    """Map every variant's detections back, pool, NMS, vote, sort."""
    boxes, cls, ious, fused = [], [], [], []
    for variant, dets in per_variant:
        if not dets:
            continue
        b, c, i, f = to_arrays(dets)
        boxes.append(tta_transform(image_w, image_h, variant, plan.shift_pixels).inverse(b))
        cls.append(c)
        ious.append(i)
        fused.append(f)
    if not boxes:
        return []
    boxes = np.concatenate(boxes)
    cls = np.concatenate(cls)
    ious = np.concatenate(ious)
    fused = np.concatenate(fused)
    keep_mask = fused >= plan.score_thr
    boxes, cls, ious, fused = boxes[keep_mask], cls[keep_mask], ious[keep_mask], fused[keep_mask]
    order = _canonical_order(boxes, cls, ious, fused)
    boxes, cls, ious, fused = boxes[order], cls[order], ious[order], fused[order]

    kept = nms_indices(boxes, fused, plan.nms_iou_thr)
    voted = vote_boxes(boxes[kept], boxes, fused, plan.vote_iou_thr)
    return [
        Detection(Box(*map(float, b)), float(cls[k]), float(ious[k]), float(fused[k]))
        for b, k in zip(voted, kept)
    ]


def keep_ratio_resize_plan(image_w: int, image_h: int, max_short: float = 1100, max_long: float = 1650) -> float:
    """Uniform scale so neither edge exceeds its cap; may upscale."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dims must be positive")
    short, long = min(image_w, image_h), max(image_w, image_h)
    return min(max_short / short, max_long / long)
