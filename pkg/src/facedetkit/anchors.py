"""Dense multi-level anchor generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ConfigError, from_mapping, read_config, to_mapping

# 2^(4/3): base scale that lets the stride-4 level reach ~10 px faces.
DEFAULT_BASE_SCALE = 2.0 ** (4.0 / 3.0)
DEFAULT_OCTAVE_STEP = 2.0 ** (1.0 / 3.0)


@dataclass(frozen=True)
class AnchorConfig:
    strides: tuple[int, ...] = (4, 8, 16, 32, 64, 128)
    base_scale: float = DEFAULT_BASE_SCALE
    octave_scales: int = 3
    octave_step: float = DEFAULT_OCTAVE_STEP
    # height / width; replace with mean_gt_aspect_ratio() of the training set
    aspect_ratios: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not self.strides:
            raise ValueError("strides must be non-empty")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if any(s <= 0 for s in self.strides):
            raise ValueError("strides must be positive")
        if self.octave_scales < 1:
            raise ValueError("octave_scales must be >= 1")
        if self.base_scale <= 0 or self.octave_step <= 0:
            raise ValueError("base_scale and octave_step must be positive")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError(f"aspect ratios must be positive, got {self.aspect_ratios}")

    @property
    def anchors_per_cell(self) -> int:
        return self.octave_scales * len(self.aspect_ratios)

    @classmethod
    def from_file(cls, path: str, section: str = "anchors") -> "AnchorConfig":
        raw = read_config(path)
        return from_mapping(cls, raw.get(section, {}), section)

    def to_dict(self) -> dict:
        return to_mapping(self)


def retinaface_style_config() -> AnchorConfig:
    """Five levels from stride 8, base scale 4: the older face-detector layout."""
    return AnchorConfig(strides=(8, 16, 32, 64, 128), base_scale=4.0)


@dataclass(frozen=True)
class AnchorGrid:
    level: int
    stride: int
    feat_w: int
    feat_h: int
    anchors: np.ndarray  # (feat_h * feat_w * per_cell, 4), read-only

    def __len__(self) -> int:
        return len(self.anchors)


def level_anchor_sizes(cfg: AnchorConfig, level: int) -> list[float]:
    if not 0 <= level < len(cfg.strides):
        raise IndexError(f"level {level} out of range for {len(cfg.strides)} strides")
    stride = cfg.strides[level]
    return [cfg.base_scale * stride * cfg.octave_step**k for k in range(cfg.octave_scales)]


def feature_dims(image_w: int, image_h: int, stride: int) -> tuple[int, int]:
    return -(-image_w // stride), -(-image_h // stride)


def _cell_shapes(cfg: AnchorConfig, level: int) -> np.ndarray:
    """(per_cell, 2) array of anchor (w, h), sizes outer and ratios inner."""
    shapes = []
    for size in level_anchor_sizes(cfg, level):
        for r in cfg.aspect_ratios:
            sr = math.sqrt(r)
            shapes.append((size / sr, size * sr))
    return np.asarray(shapes, dtype=np.float64)


def generate_anchors(cfg: AnchorConfig, image_w: int, image_h: int) -> list[AnchorGrid]:
    """One grid per stride; row-major over cells, anchors-per-cell innermost."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"image dims must be positive, got {image_w}x{image_h}")
    grids = []
    for level, stride in enumerate(cfg.strides):
        fw, fh = feature_dims(image_w, image_h, stride)
        cx = (np.arange(fw, dtype=np.float64) + 0.5) * stride
        cy = (np.arange(fh, dtype=np.float64) + 0.5) * stride
        cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
        centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)  # (cells, 2)
        half = _cell_shapes(cfg, level) / 2  # (per_cell, 2)
        lo = centers[:, None, :] - half[None, :, :]
        hi = centers[:, None, :] + half[None, :, :]
        boxes = np.concatenate([lo, hi], axis=2).reshape(-1, 4)
        boxes.setflags(write=False)
        grids.append(AnchorGrid(level, stride, fw, fh, boxes))
    return grids


def flat_anchors(grids: Sequence[AnchorGrid]) -> np.ndarray:
    return np.concatenate([g.anchors for g in grids], axis=0)


def anchor_count(cfg: AnchorConfig, image_w: int, image_h: int) -> int:
    total = 0
    for stride in cfg.strides:
        fw, fh = feature_dims(image_w, image_h, stride)
        total += fw * fh * cfg.anchors_per_cell
    return total


def mean_gt_aspect_ratio(boxes) -> float:
    """Arithmetic mean of height / width over positive-extent boxes."""
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(arr) == 0:
        raise ValueError("cannot compute an aspect ratio from zero boxes")
    w = arr[:, 2] - arr[:, 0]
    h = arr[:, 3] - arr[:, 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("every box needs positive width and height")
    return float(np.mean(h / w))


__all__ = [
    "AnchorConfig",
    "AnchorGrid",
    "ConfigError",
    "anchor_count",
    "flat_anchors",
    "generate_anchors",
    "level_anchor_sizes",
    "mean_gt_aspect_ratio",
    "retinaface_style_config",
]
