"""Deformable-convolution forward kernel and the feature-extractor shape ledger."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorConfig, feature_dims


@dataclass
class ConvSpec:
    weight: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray | None = None  # (out_channels,)
    stride: int = 1
    padding: int | None = None  # default: kh // 2

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ValueError(f"weight must be (out, in, kh, kw), got {self.weight.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[0])
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias must have shape ({self.weight.shape[0]},), got {self.bias.shape}")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")
        if self.padding is None:
            self.padding = self.weight.shape[2] // 2

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def output_size(h: int, w: int, spec: ConvSpec) -> tuple[int, int]:
    kh, kw = spec.kernel
    return h + 2 * spec.padding - kh + 1, w + 2 * spec.padding - kw + 1


def bilinear_sample(x: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Sample ``x (C, H, W)`` at real positions; corners outside read as 0."""
    c, h, w = x.shape
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    ly = py - y0
    lx = px - x0
    out = np.zeros((c,) + py.shape)
    for dy, wy in ((0, 1.0 - ly), (1, ly)):
        for dx, wx in ((0, 1.0 - lx), (1, lx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = x[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(valid, wy * wx, 0.0) * vals
    return out


def deform_conv2d_forward(x: np.ndarray, spec: ConvSpec, offsets: np.ndarray) -> np.ndarray:
    """Deformable convolution of ``x (C, H, W)``.

    ``offsets`` has shape ``(out_h, out_w, kh * kw, 2)`` holding ``(dy, dx)``
    per output location and tap; taps are ordered row-major over the kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"input must be (C, H, W), got {x.shape}")
    cout, cin, kh, kw = spec.weight.shape
    if x.shape[0] != cin:
        raise ValueError(f"input has {x.shape[0]} channels, weight expects {cin}")
    oh, ow = output_size(x.shape[1], x.shape[2], spec)
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (oh, ow, kh * kw, 2):
        raise ValueError(f"offsets must have shape {(oh, ow, kh * kw, 2)}, got {offsets.shape}")
    base_y, base_x = np.meshgrid(np.arange(oh, dtype=np.float64), np.arange(ow, dtype=np.float64), indexing="ij")
    out = np.zeros((cout, oh, ow))
    for k in range(kh * kw):
        ky, kx = divmod(k, kw)
        py = base_y - spec.padding + ky + offsets[:, :, k, 0]
        px = base_x - spec.padding + kx + offsets[:, :, k, 1]
        sampled = bilinear_sample(x, py, px)  # (cin, oh, ow)
        out += np.tensordot(spec.weight[:, :, ky, kx], sampled, axes=(1, 0))
    return out + spec.bias[:, None, None]


LEVEL_NAMES = ("P2", "P3", "P4", "P5", "P6", "P7")


@dataclass
class LevelRecord:
    name: str
    stride: int
    feat_w: int
    feat_h: int
    head_channels: int
    anchors: int


@dataclass
class ExtractorLedger:
    levels: list[LevelRecord]
    dcn_stages: dict[int, bool]  # backbone stage 1..5 -> deformable
    inception_branches: tuple[int, ...]  # stacked 3x3 convs per parallel branch
    backbone: str = "ResNet-50"
    neck: str = "FPN"
    notes: list[str] = field(default_factory=list)

    @property
    def total_anchors(self) -> int:
        return sum(l.anchors for l in self.levels)


def extractor_ledger(
    input_w: int,
    input_h: int,
    anchor_cfg: AnchorConfig = AnchorConfig(),
    head_channels: int = 256,
    inception_branches: tuple[int, ...] = (1, 2, 3),
) -> ExtractorLedger:
    """Per-level feature dims and anchor counts for a given input size.

    ``head_channels`` and ``inception_branches`` are conventional defaults,
    not published values.
    """
    if input_w <= 0 or input_h <= 0:
        raise ValueError("input dims must be positive")
    strides = anchor_cfg.strides
    levels = []
    for i, stride in enumerate(strides):
        fw, fh = feature_dims(input_w, input_h, stride)
        name = LEVEL_NAMES[i] if len(strides) == len(LEVEL_NAMES) else f"L{i}"
        levels.append(LevelRecord(name, stride, fw, fh, head_channels, fw * fh * anchor_cfg.anchors_per_cell))
    return ExtractorLedger(
        levels=levels,
        dcn_stages={s: s in (4, 5) for s in range(1, 6)},
        inception_branches=tuple(inception_branches),
        notes=["head_channels and inception_branches are configuration, not published values"],
    )
