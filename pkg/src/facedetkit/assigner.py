"""Max-IoU label assignment and positives-per-ground-truth statistics."""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .anchors import AnchorConfig, flat_anchors, generate_anchors
from .geometry import as_boxes, box_area, pairwise_iou

NEGATIVE = -1

# anchors per IoU block; bounds the (block, G) IoU matrix for crowded images
_CHUNK = 16384


@dataclass(frozen=True)
class AssignerConfig:
    pos_iou_thr: float = 0.35
    neg_iou_thr: float = 0.35
    match_low_quality: bool = True

    def __post_init__(self):
        if not 0 < self.neg_iou_thr <= self.pos_iou_thr < 1:
            raise ValueError(
                f"need 0 < neg_iou_thr <= pos_iou_thr < 1, got {self.neg_iou_thr}, {self.pos_iou_thr}"
            )


def retinaface_style_assigner() -> AssignerConfig:
    return AssignerConfig(pos_iou_thr=0.5, neg_iou_thr=0.5)


@dataclass
class AssignResult:
    labels: np.ndarray  # (A,) int: NEGATIVE or matched gt index
    matched_iou: np.ndarray  # (A,) IoU with the assigned gt, or best IoU for negatives
    positives_per_gt: np.ndarray  # (G,) int

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.labels >= 0))

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels >= 0


def _max_iou(anchors: np.ndarray, gts: np.ndarray):
    """Per-anchor best IoU / gt and per-gt best IoU / anchor, in blocks."""
    n = len(anchors)
    best_iou = np.empty(n)
    best_gt = np.empty(n, dtype=np.int64)
    gt_best_iou = np.full(len(gts), -1.0)
    gt_best_anchor = np.zeros(len(gts), dtype=np.int64)
    for start in range(0, n, _CHUNK):
        block = pairwise_iou(anchors[start:start + _CHUNK], gts)
        idx = np.argmax(block, axis=1)
        best_gt[start:start + len(block)] = idx
        best_iou[start:start + len(block)] = block[np.arange(len(block)), idx]
        col_idx = np.argmax(block, axis=0)
        col_val = block[col_idx, np.arange(len(gts))]
        better = col_val > gt_best_iou  # strict: earliest anchor wins ties
        gt_best_iou[better] = col_val[better]
        gt_best_anchor[better] = col_idx[better] + start
    return best_iou, best_gt, gt_best_iou, gt_best_anchor


def assign(anchors, gts, cfg: AssignerConfig = AssignerConfig()) -> AssignResult:
    """Label every anchor NEGATIVE or POSITIVE(gt index).

    An anchor is positive for its highest-IoU ground truth (lowest index on
    ties) when that IoU reaches ``pos_iou_thr``.  With ``match_low_quality``
    each ground truth additionally claims its single best anchor, provided
    the overlap is non-zero; later ground truths win a shared best anchor.
    """
    anchors = as_boxes(anchors)
    gts = as_boxes(gts)
    n = len(anchors)
    if len(gts) == 0 or n == 0:
        return AssignResult(
            np.full(n, NEGATIVE, dtype=np.int64), np.zeros(n), np.zeros(len(gts), dtype=np.int64)
        )
    best_iou, best_gt, gt_best_iou, gt_best_anchor = _max_iou(anchors, gts)
    labels = np.where(best_iou >= cfg.pos_iou_thr, best_gt, NEGATIVE)
    matched = best_iou.copy()
    if cfg.match_low_quality:
        for g in range(len(gts)):
            if gt_best_iou[g] > 0:
                a = gt_best_anchor[g]
                labels[a] = g
                matched[a] = gt_best_iou[g]
    counts = np.bincount(labels[labels >= 0], minlength=len(gts)).astype(np.int64)
    return AssignResult(labels.astype(np.int64), matched, counts)


class ScaleBucket(enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"

    @classmethod
    def of_area(cls, area: float) -> "ScaleBucket":
        if area < 32**2:
            return cls.SMALL
        if area < 96**2:
            return cls.MEDIUM
        return cls.LARGE


@dataclass
class BucketStats:
    bucket: ScaleBucket
    positives: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.positives)

    @property
    def mean(self) -> float:
        return float(np.mean(self.positives)) if self.positives else float("nan")

    def density(self) -> list[tuple[int, float, float]]:
        """``(positives_count, frequency, cumulative)`` rows, k = 0..max."""
        if not self.positives:
            return []
        hist = np.bincount(np.asarray(self.positives, dtype=np.int64))
        freq = hist / hist.sum()
        cum = np.cumsum(freq)
        cum[-1] = 1.0
        return [(k, float(f), float(c)) for k, (f, c) in enumerate(zip(freq, cum))]


@dataclass
class DistributionReport:
    buckets: dict[ScaleBucket, BucketStats]

    def mean_ratio(self, num: ScaleBucket = ScaleBucket.LARGE, den: ScaleBucket = ScaleBucket.SMALL) -> float:
        return self.buckets[num].mean / self.buckets[den].mean

    def rows(self) -> list[tuple[str, int, float, float]]:
        out = []
        for bucket in ScaleBucket:
            for k, f, c in self.buckets[bucket].density():
                out.append((bucket.value, k, f, c))
        return out


def distribution_report(
    dataset: Sequence[tuple[np.ndarray, tuple[int, int]]],
    anchor_cfg: AnchorConfig,
    assigner_cfg: AssignerConfig,
    jobs: int = 1,
) -> DistributionReport:
    """Bucket every ground truth by area and collect its positive-anchor count.

    ``dataset`` items are ``(gts (G, 4), (image_w, image_h))``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cache: dict[tuple[int, int], np.ndarray] = {}
    for _, size in dataset:
        if size not in cache:
            cache[size] = flat_anchors(generate_anchors(anchor_cfg, *size))

    def one(item):
        gts, size = item
        gts = as_boxes(gts)
        res = assign(cache[size], gts, assigner_cfg)
        return box_area(gts), res.positives_per_gt

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, dataset))
    else:
        results = [one(item) for item in dataset]

    buckets = {b: BucketStats(b) for b in ScaleBucket}
    for areas, counts in results:
        for area, c in zip(areas, counts):
            if area > 0:
                buckets[ScaleBucket.of_area(area)].positives.append(int(c))
    return DistributionReport(buckets)


def synthetic_scale_dataset(
    seed: int = 0,
    num_images: int = 40,
    image_size: tuple[int, int] = (640, 640),
    sizes: Iterable[tuple[float, float]] = ((10, 30), (36, 90), (110, 300)),
    faces_per_scale: int = 3,
) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Random square-ish faces drawn from each (min, max) side range."""
    rng = np.random.default_rng(seed)
    w, h = image_size
    sizes = list(sizes)
    out = []
    for _ in range(num_images):
        boxes = []
        for lo, hi in sizes:
            for _ in range(faces_per_scale):
                side = rng.uniform(lo, hi)
                bw = side * rng.uniform(0.9, 1.1)
                bh = side * rng.uniform(0.9, 1.1)
                x1 = rng.uniform(0, w - bw)
                y1 = rng.uniform(0, h - bh)
                boxes.append((x1, y1, x1 + bw, y1 + bh))
        out.append((np.asarray(boxes), image_size))
    return out
