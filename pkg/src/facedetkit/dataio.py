"""WIDER FACE ground-truth parsing, prediction files, and training augmentation."""

from __future__ import annotations

import logging
import os
import posixpath
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .geometry import Box, as_boxes, hflip_boxes, scale_boxes
from .postprocess import Detection

log = logging.getLogger(__name__)

# inclusive upper bounds; every attribute starts at 0
ATTRIBUTE_RANGES = {
    "blur": 2,
    "expression": 1,
    "illumination": 1,
    "invalid": 1,
    "occlusion": 2,
    "pose": 1,
}
ATTRIBUTES = tuple(ATTRIBUTE_RANGES)


class ParseError(ValueError):
    def __init__(self, line: int, message: str, source: str = "<stream>"):
        self.line = line
        super().__init__(f"{source}:{line}: {message}")


@dataclass(frozen=True)
class FaceAnnotation:
    box: Box
    blur: int = 0
    expression: int = 0
    illumination: int = 0
    invalid: int = 0
    occlusion: int = 0
    pose: int = 0

    def __post_init__(self):
        if self.box.x2 < self.box.x1 or self.box.y2 < self.box.y1:
            raise ValueError(f"negative box extent: {self.box}")
        for name, hi in ATTRIBUTE_RANGES.items():
            v = getattr(self, name)
            if not 0 <= v <= hi:
                raise ValueError(f"{name}={v} outside [0, {hi}]")


@dataclass
class ImageRecord:
    path: str
    annotations: list[FaceAnnotation] = field(default_factory=list)
    width: int | None = None
    height: int | None = None

    @property
    def boxes(self) -> np.ndarray:
        if not self.annotations:
            return np.zeros((0, 4))
        return np.array([a.box for a in self.annotations], dtype=np.float64)

    @property
    def key(self) -> str:
        return image_key(self.path)


def image_key(path: str) -> str:
    """``'0--Parade/0_Parade_x_1.jpg'`` -> ``'0--Parade/0_Parade_x_1'``."""
    return posixpath.splitext(path.replace(os.sep, "/"))[0]


def _number(tok: str) -> float:
    v = float(tok)
    if not np.isfinite(v):
        raise ValueError(tok)
    return v


def parse_wider_gt(stream: TextIO | Iterable[str], source: str = "<stream>") -> list[ImageRecord]:
    """Parse the official ``wider_face_*_bbx_gt.txt`` layout.

    A zero-count image is followed by one all-zero placeholder line, which
    is consumed.
    """
    lines = [line.rstrip("\r\n") for line in stream]
    records = []
    i = 0
    n = len(lines)

    def face_fields(idx: int) -> list[float] | None:
        toks = lines[idx].split()
        if len(toks) != 4 + len(ATTRIBUTES):
            return None
        try:
            return [_number(t) for t in toks]
        except ValueError:
            return None

    while i < n:
        path = lines[i].strip()
        if not path:
            i += 1
            continue
        if i + 1 >= n:
            raise ParseError(i + 2, f"missing face count after {path!r}", source)
        try:
            count = int(lines[i + 1].strip())
        except ValueError:
            raise ParseError(i + 2, f"bad face count {lines[i + 1]!r}", source) from None
        if count < 0:
            raise ParseError(i + 2, f"negative face count {count}", source)
        i += 2
        anns = []
        for _ in range(count):
            if i >= n:
                raise ParseError(i + 1, f"expected {count} faces for {path!r}, file ended", source)
            vals = face_fields(i)
            if vals is None:
                raise ParseError(i + 1, f"malformed face line {lines[i]!r}", source)
            x, y, w, h = vals[:4]
            attrs = [int(v) for v in vals[4:]]
            try:
                anns.append(FaceAnnotation(Box.from_xywh(x, y, w, h), *attrs))
            except ValueError as exc:
                raise ParseError(i + 1, str(exc), source) from None
            i += 1
        if count == 0 and i < n and face_fields(i) is not None:
            i += 1
        records.append(ImageRecord(path, anns))
    return records


def load_wider_gt(path: str | os.PathLike) -> list[ImageRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_wider_gt(fh, source=str(path))


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def serialize_wider_gt(records: Sequence[ImageRecord]) -> str:
    out = []
    for rec in records:
        out.append(rec.path)
        out.append(str(len(rec.annotations)))
        for a in rec.annotations:
            b = a.box
            nums = [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1]
            out.append(" ".join([_fmt(v) for v in nums] + [str(getattr(a, k)) for k in ATTRIBUTES]))
        if not rec.annotations:
            out.append(" ".join(["0"] * (4 + len(ATTRIBUTES))))
    return "\n".join(out) + "\n"


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# Prediction files: <dir>/<event>/<image stem>.txt


def format_predictions(name: str, dets: Sequence[Detection]) -> str:
    lines = [name, str(len(dets))]
    for d in dets:
        b = d.box
        score = d.fused_score
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0, 1]")
        lines.append(" ".join(repr(float(v)) for v in (b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1, score)))
    return "\n".join(lines) + "\n"


def _write_key(out_dir, key: str, dets: Sequence[Detection]) -> Path:
    target = Path(out_dir) / f"{key}.txt"
    atomic_write_text(target, format_predictions(posixpath.basename(key), dets))
    return target


def write_predictions(out_dir: str | os.PathLike, image_path: str, dets: Sequence[Detection]) -> Path:
    return _write_key(out_dir, image_key(image_path), dets)


def parse_predictions(text: str, source: str = "<stream>") -> tuple[str, list[Detection]]:
    lines = [ln.strip() for ln in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    if len(lines) < 2:
        raise ParseError(len(lines) + 1, "expected image name and detection count", source)
    name = lines[0]
    try:
        count = int(float(lines[1]))
    except ValueError:
        raise ParseError(2, f"bad detection count {lines[1]!r}", source) from None
    body = lines[2:]
    if len(body) != count:
        raise ParseError(2, f"declared {count} detections, found {len(body)}", source)
    dets = []
    for k, line in enumerate(body, start=3):
        toks = line.split()
        if len(toks) < 5:
            raise ParseError(k, f"malformed detection line {line!r}", source)
        try:
            x, y, w, h, s = (float(t) for t in toks[:5])
        except ValueError:
            raise ParseError(k, f"malformed detection line {line!r}", source) from None
        dets.append(Detection.scored((x, y, x + w, y + h), s))
    return name, dets


def read_predictions(pred_dir: str | os.PathLike) -> dict[str, list[Detection]]:
    """All prediction files under ``pred_dir``, keyed by ``event/stem``."""
    root = Path(pred_dir)
    out = {}
    for path in sorted(root.rglob("*.txt")):
        rel = path.relative_to(root).with_suffix("").as_posix()
        _, dets = parse_predictions(path.read_text(encoding="utf-8"), source=str(path))
        out[rel] = dets
    return out


def write_prediction_set(out_dir: str | os.PathLike, preds: Mapping[str, Sequence[Detection]]) -> None:
    """Write ``{event/stem: detections}`` as one file per image."""
    for key, dets in preds.items():
        _write_key(out_dir, key, dets)


# Augmentation


@dataclass(frozen=True)
class AugConfig:
    crop_ratios: tuple[float, ...] = (0.3, 0.45, 0.6, 0.8, 1.0)
    hflip_prob: float = 0.5
    output_size: int = 640
    distort_prob: float = 0.5
    brightness_delta: float = 32 / 255
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    hue_delta: float = 18.0  # degrees
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    min_face_size: float = 0.0  # cropped faces narrower/shorter than this are dropped
    seed: int = 0

    def __post_init__(self):
        if not self.crop_ratios or any(not 0 < r <= 1 for r in self.crop_ratios):
            raise ValueError(f"crop ratios must lie in (0, 1], got {self.crop_ratios}")
        for name in ("hflip_prob", "distort_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.output_size <= 0:
            raise ValueError("output_size must be positive")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be positive")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float, RGB in [0, 1] before normalization
    boxes: np.ndarray  # (N, 4)


def random_square_crop(image_w: int, image_h: int, boxes, ratio: float, rng: np.random.Generator):
    """Pick a square patch of side ``ratio * short_edge`` uniformly at random.

    Returns ``(patch (x0, y0, x1, y1), boxes in patch coordinates, kept
    indices)``.  A face survives when its center lies strictly inside the
    patch; survivors are clipped to it.
    """
    boxes = as_boxes(boxes)
    short = min(image_w, image_h)
    side = int(min(max(round(ratio * short), 1), short))
    x0 = int(rng.integers(0, image_w - side + 1))
    y0 = int(rng.integers(0, image_h - side + 1))
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    inside = (cx > x0) & (cx < x0 + side) & (cy > y0) & (cy < y0 + side)
    kept = np.flatnonzero(inside)
    out = boxes[kept].copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], x0, x0 + side) - x0
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], y0, y0 + side) - y0
    return (x0, y0, x0 + side, y0 + side), out, kept


def photometric_distort(image: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter, each with ``distort_prob``."""
    from skimage.color import hsv2rgb, rgb2hsv

    img = image.astype(np.float64, copy=True)
    if rng.random() < cfg.distort_prob:
        img += rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    contrast_first = rng.random() < 0.5

    def contrast(x):
        if rng.random() < cfg.distort_prob:
            x = x * rng.uniform(*cfg.contrast_range)
        return x

    if contrast_first:
        img = contrast(img)
    hsv = rgb2hsv(np.clip(img, 0.0, 1.0))
    if rng.random() < cfg.distort_prob:
        hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(*cfg.saturation_range), 0.0, 1.0)
    if rng.random() < cfg.distort_prob:
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue_delta, cfg.hue_delta) / 360.0) % 1.0
    img = hsv2rgb(hsv)
    if not contrast_first:
        img = contrast(img)
    return np.clip(img, 0.0, 1.0)


def hflip_sample(sample: Sample) -> Sample:
    w = sample.image.shape[1]
    return Sample(sample.image[:, ::-1].copy(), hflip_boxes(sample.boxes, w))


def resize_sample(sample: Sample, size: int) -> Sample:
    from skimage.transform import resize

    h, w = sample.image.shape[:2]
    img = resize(sample.image, (size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    return Sample(img, scale_boxes(sample.boxes, size / w, size / h))


def normalize_image(image: np.ndarray, mean, std) -> np.ndarray:
    return (image - np.asarray(mean)) / np.asarray(std)


def augment_train(sample: Sample, cfg: AugConfig = AugConfig(), rng: np.random.Generator | None = None) -> Sample:
    """Crop, distort, flip, resize to ``output_size``, normalize."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    h, w = sample.image.shape[:2]
    ratio = float(rng.choice(np.asarray(cfg.crop_ratios)))
    (x0, y0, x1, y1), boxes, _ = random_square_crop(w, h, sample.boxes, ratio, rng)
    if cfg.min_face_size > 0 and len(boxes):
        big = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_face_size) & ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_face_size)
        boxes = boxes[big]
    out = Sample(sample.image[y0:y1, x0:x1], boxes)
    out = Sample(photometric_distort(out.image, cfg, rng), out.boxes)
    if rng.random() < cfg.hflip_prob:
        out = hflip_sample(out)
    out = resize_sample(out, cfg.output_size)
    return Sample(normalize_image(out.image, cfg.mean, cfg.std), out.boxes)
