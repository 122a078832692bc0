"""WIDER FACE-style average precision with Easy/Medium/Hard masks.

Conventions: greedy IoU matching in descending score order, scores min-max
normalized over the whole prediction set, precision/recall sampled at
``num_thresholds`` evenly spaced thresholds ``1 - (k + 1) / T``, and AP as
the sum of recall increments times the precision at which they occur.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataio import ImageRecord, image_key, read_predictions
from .geometry import as_boxes, pairwise_iou
from .postprocess import Detection, to_arrays

TP, FP, IGNORED = 1, 0, -1
DIFFICULTIES = ("easy", "medium", "hard")


class EvalError(ValueError):
    pass


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def rows(self):
        return zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist())


@dataclass
class APResult:
    ap: float
    num_gt: int
    num_dets: int
    curve: PRCurve


def match_image(det_boxes, gt_boxes, iou_thr: float = 0.5, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching of score-sorted detections to ground truths.

    Returns per-detection flags (``TP``, ``FP`` or ``IGNORED``) and per-gt
    matched flags.  A detection that reaches ``iou_thr`` only with
    out-of-mask ground truths is ``IGNORED``.
    """
    dets = as_boxes(det_boxes)
    gts = as_boxes(gt_boxes)
    mask = np.ones(len(gts), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    flags = np.full(len(dets), FP, dtype=np.int64)
    matched = np.zeros(len(gts), dtype=bool)
    if len(dets) == 0 or len(gts) == 0:
        return flags, matched
    overlaps = pairwise_iou(dets, gts)
    for d in range(len(dets)):
        ov = overlaps[d]
        cand = np.where(mask & ~matched, ov, -1.0)
        g = int(np.argmax(cand))
        if cand[g] >= iou_thr:
            flags[d] = TP
            matched[g] = True
        elif np.any(~mask & (ov >= iou_thr)):
            flags[d] = IGNORED
    return flags, matched


def normalize_scores(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return scores
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.ones_like(scores)
    return (scores - lo) / (hi - lo)


def threshold_grid(num_thresholds: int = 1000) -> np.ndarray:
    k = np.arange(num_thresholds, dtype=np.float64)
    return 1.0 - (k + 1.0) / num_thresholds


def ap(scores, flags, num_gt: int, num_thresholds: int = 1000, normalized: bool = False) -> APResult:
    """AP from pooled detection scores and match flags.

    ``scores`` are raw unless ``normalized``; ignored detections take part
    in normalization but not in the curve.
    """
    if num_gt <= 0:
        raise EvalError("AP is undefined with zero ground truths")
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=np.int64)
    if not normalized:
        scores = normalize_scores(scores)
    used = flags != IGNORED
    s = scores[used]
    tp = flags[used] == TP
    order = np.argsort(-s, kind="stable")
    s = s[order]
    tp_cum = np.concatenate([[0], np.cumsum(tp[order])])
    thresholds = threshold_grid(num_thresholds)
    # number of detections with score >= t, via the descending-sorted scores
    n_above = np.searchsorted(-s, -thresholds, side="right")
    n_tp = tp_cum[n_above]
    precision = np.divide(n_tp, n_above, out=np.zeros(num_thresholds), where=n_above > 0)
    recall = n_tp / num_gt
    increments = np.diff(np.concatenate([[0.0], recall]))
    value = float(np.sum(increments * precision))
    return APResult(value, int(num_gt), int(used.sum()), PRCurve(thresholds, precision, recall))


def parse_difficulty_list(text: str) -> dict[str, list[int]]:
    """One line per image: ``<event/stem> <1-based gt index> ...``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        toks = line.split()
        if not toks or toks[0].startswith("#"):
            continue
        try:
            idx = [int(t) for t in toks[1:]]
        except ValueError:
            raise EvalError(f"line {lineno}: non-integer gt index in {line!r}") from None
        if any(i < 1 for i in idx):
            raise EvalError(f"line {lineno}: gt indices are 1-based")
        out[image_key(toks[0])] = idx
    return out


def load_difficulty_list(path: str | os.PathLike) -> dict[str, list[int]]:
    with open(path, encoding="utf-8") as fh:
        return parse_difficulty_list(fh.read())


def format_difficulty_list(lists: Mapping[str, Sequence[int]]) -> str:
    return "".join(f"{k} {' '.join(map(str, v))}".rstrip() + "\n" for k, v in lists.items())


def evaluate_run(
    predictions: str | os.PathLike | Mapping[str, Sequence[Detection]],
    ground_truth: Sequence[ImageRecord],
    difficulty_lists: Mapping[str, Mapping[str, Sequence[int]]],
    iou_thr: float = 0.5,
    num_thresholds: int = 1000,
    jobs: int = 1,
) -> dict[str, APResult]:
    """AP per difficulty.  Images without a prediction file count as empty."""
    if not isinstance(predictions, Mapping):
        predictions = read_predictions(predictions)
    per_image = []
    for rec in ground_truth:
        dets = predictions.get(rec.key)
        if dets is None:
            warnings.warn(f"no predictions for {rec.key}; treating as zero detections", stacklevel=2)
            dets = []
        boxes, _, _, scores = to_arrays(dets)
        order = np.argsort(-scores, kind="stable")
        per_image.append((rec, boxes[order], scores[order]))

    all_scores = np.concatenate([s for _, _, s in per_image]) if per_image else np.zeros(0)
    norm = normalize_scores(all_scores)
    splits = np.cumsum([len(s) for _, _, s in per_image])[:-1]
    norm_per_image = np.split(norm, splits) if per_image else []

    results = {}
    for name, lists in difficulty_lists.items():
        def one(i):
            rec, boxes, _ = per_image[i]
            mask = np.zeros(len(rec.annotations), dtype=bool)
            for idx in lists.get(rec.key, []):
                if idx > len(mask):
                    raise EvalError(f"{name}: gt index {idx} out of range for {rec.key}")
                mask[idx - 1] = True
            flags, _ = match_image(boxes, rec.boxes, iou_thr, mask)
            return flags, int(mask.sum())

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                matched = list(pool.map(one, range(len(per_image))))
        else:
            matched = [one(i) for i in range(len(per_image))]
        flags = np.concatenate([f for f, _ in matched]) if matched else np.zeros(0, dtype=np.int64)
        num_gt = sum(n for _, n in matched)
        try:
            results[name] = ap(norm, flags, num_gt, num_thresholds, normalized=True)
        except EvalError as exc:
            raise EvalError(f"{name}: {exc}") from None
    return results


def all_gt_lists(records: Sequence[ImageRecord]) -> dict[str, list[int]]:
    """A difficulty list selecting every ground truth."""
    return {r.key: list(range(1, len(r.annotations) + 1)) for r in records}
