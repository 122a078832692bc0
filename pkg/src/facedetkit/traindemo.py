"""Desk-scale end-to-end training on synthetic scenes.

A per-level linear head maps handcrafted per-anchor features to one
classification logit, four box deltas and one IoU logit.  Everything past
the features (assignment, the three losses, decoding, SGD with warmup and
cosine restarts, NMS, AP) is the real pipeline.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .anchors import AnchorConfig, flat_anchors, generate_anchors
from .assigner import AssignerConfig, assign
from .dataio import FaceAnnotation, ImageRecord, atomic_write_bytes
from .evaluation import all_gt_lists, evaluate_run
from .geometry import Box
from .losses import FocalConfig, LossWeights, decode_deltas_batch, sigmoid, total_loss
from .postprocess import Detection, fuse_scores, nms_indices

log = logging.getLogger(__name__)

NUM_OUTPUTS = 6  # cls logit, dx, dy, dw, dh, iou logit
MODEL_MAGIC = b"FDKH"
MODEL_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, last_finite: float):
        self.iteration = iteration
        self.last_finite = last_finite
        super().__init__(f"loss became non-finite at iteration {iteration}; last finite loss {last_finite:.6g}")


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    min_faces: int = 1
    max_faces: int = 4
    min_side: int = 12
    max_side: int = 56
    background: float = 0.1
    noise_std: float = 0.05
    face_intensity: tuple[float, float] = (0.7, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_max: float = 3.75e-3
    lr_min: float = 3.75e-5
    warmup_start: float = 3.75e-4
    warmup_iters: int = 500
    cycle_epochs: int = 30
    restarts: bool = True
    lr_scale: float = 1.0
    iters_per_epoch: int = 20
    total_epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    prior: float = 0.01
    init_std: float = 0.01
    heldout_scenes: int = 50
    score_thr: float = 0.05
    nms_iou_thr: float = 0.5
    fusion_alpha: float = 0.5
    smoothing_window: int = 100

    def __post_init__(self):
        if not self.lr_min < self.warmup_start < self.lr_max:
            raise ValueError("need lr_min < warmup_start < lr_max")
        if self.lr_scale < 0:
            raise ValueError("lr_scale must be >= 0")
        if min(self.iters_per_epoch, self.cycle_epochs, self.total_epochs, self.batch_size) < 1:
            raise ValueError("epoch, cycle and batch sizes must be positive")
        if not 0 < self.prior < 1:
            raise ValueError("prior must lie in (0, 1)")

    @property
    def total_iters(self) -> int:
        return self.iters_per_epoch * self.total_epochs


DEMO_ANCHORS = AnchorConfig(strides=(4, 8, 16, 32))


def lr_at(iteration: int, iters_per_epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Linear warmup, then cosine annealing restarted every ``cycle_epochs``.

    Cycles are counted from the end of warmup.  With ``restarts`` off a
    single cosine spans the remaining ``total_epochs``.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < cfg.warmup_iters:
        frac = iteration / cfg.warmup_iters
        lr = cfg.warmup_start + (cfg.lr_max - cfg.warmup_start) * frac
    else:
        since = iteration - cfg.warmup_iters
        if cfg.restarts:
            cycle = cfg.cycle_epochs * iters_per_epoch
            t = (since % cycle) / cycle
        else:
            span = max(cfg.total_epochs * iters_per_epoch - cfg.warmup_iters, 1)
            t = min(since / span, 1.0)
        lr = cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * t)) / 2
    return lr * cfg.lr_scale


def sgd_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray, lr: float, cfg: TrainConfig = TrainConfig()):
    """Momentum SGD with L2 weight decay folded into the gradient."""
    g = grads + cfg.weight_decay * params
    velocity = cfg.momentum * velocity - lr * g
    return params + velocity, velocity


# Synthetic scenes


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W)
    gts: np.ndarray  # (G, 4) integer-valued corners
    seed: tuple[int, ...]


def make_scene(seed, cfg: SceneConfig = SceneConfig()) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    image = cfg.background + cfg.noise_std * rng.standard_normal((s, s))
    n = int(rng.integers(cfg.min_faces, cfg.max_faces + 1))
    gts = []
    for _ in range(50 * n):
        if len(gts) == n:
            break
        side = rng.uniform(cfg.min_side, cfg.max_side)
        aspect = rng.uniform(0.8, 1.25)
        w = int(round(side / math.sqrt(aspect)))
        h = int(round(side * math.sqrt(aspect)))
        x1 = int(rng.integers(0, s - w + 1))
        y1 = int(rng.integers(0, s - h + 1))
        box = (x1, y1, x1 + w, y1 + h)
        # keep a 2 px gap so faces never touch
        if any(box[0] < g[2] + 2 and g[0] < box[2] + 2 and box[1] < g[3] + 2 and g[1] < box[3] + 2 for g in gts):
            continue
        gts.append(box)
        image[y1:y1 + h, x1:x1 + w] = rng.uniform(*cfg.face_intensity)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    return SyntheticScene(image, gts, tuple(np.atleast_1d(seed).tolist()))


class FeatureExtractor:
    """Per-anchor box statistics from integral images of a foreground mask.

    Region bounds depend only on the anchors, so they are rounded to pixel
    indices once and reused for every scene.
    """

    names = (
        "in",
        "core",
        "ring",
        "in_no_ring",
        "centroid_dx",
        "centroid_dy",
        "log_extent_w",
        "log_extent_h",
        "window",
        "in_sq",
        "in_no_ring_sq",
        "mass_inside",
    )

    def __init__(self, anchors: np.ndarray, image_size: int, fg_threshold: float = 0.4):
        self.anchors = anchors
        self.size = image_size
        self.fg_threshold = fg_threshold
        a = anchors
        w = a[:, 2] - a[:, 0]
        h = a[:, 3] - a[:, 1]
        cx = (a[:, 0] + a[:, 2]) / 2
        cy = (a[:, 1] + a[:, 3]) / 2
        self.aw, self.ah, self.acx, self.acy = w, h, cx, cy
        self.r_in = self._region(a)
        self.r_core = self._region(np.stack([cx - w / 4, cy - h / 4, cx + w / 4, cy + h / 4], 1))
        self.r_win = self._region(np.stack([cx - w, cy - h, cx + w, cy + h], 1))

    def _region(self, boxes):
        r = np.clip(np.rint(boxes), 0, self.size).astype(np.int64)
        area = (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])
        return r, area

    @staticmethod
    def _sum(ii, region):
        r, _ = region
        x1, y1, x2, y2 = r.T
        return ii[y2, x2] - ii[y1, x2] - ii[y2, x1] + ii[y1, x1]

    @staticmethod
    def _integral(img):
        ii = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
        ii[1:, 1:] = img.cumsum(0).cumsum(1)
        return ii

    def __call__(self, image: np.ndarray) -> np.ndarray:
        fg = (image > self.fg_threshold).astype(np.float64)
        ys, xs = np.mgrid[0:fg.shape[0], 0:fg.shape[1]] + 0.5
        ii = self._integral(fg)
        ii_x = self._integral(fg * xs)
        ii_y = self._integral(fg * ys)
        ii_xx = self._integral(fg * xs * xs)
        ii_yy = self._integral(fg * ys * ys)

        def mean(region, s):
            area = region[1]
            return np.divide(s, area, out=np.zeros_like(s), where=area > 0)

        s_in = self._sum(ii, self.r_in)
        s_win = self._sum(ii, self.r_win)
        m_in = mean(self.r_in, s_in)
        m_core = mean(self.r_core, self._sum(ii, self.r_core))
        ring_area = self.r_win[1] - self.r_in[1]
        m_ring = np.divide(s_win - s_in, ring_area, out=np.zeros_like(s_in), where=ring_area > 0)
        m_win = mean(self.r_win, s_win)

        has = s_win > 0
        safe = np.where(has, s_win, 1.0)
        mx = self._sum(ii_x, self.r_win) / safe
        my = self._sum(ii_y, self.r_win) / safe
        vx = np.clip(self._sum(ii_xx, self.r_win) / safe - mx * mx, 0.0, None)
        vy = np.clip(self._sum(ii_yy, self.r_win) / safe - my * my, 0.0, None)
        cdx = np.where(has, (mx - self.acx) / self.aw, 0.0)
        cdy = np.where(has, (my - self.acy) / self.ah, 0.0)
        # a uniform bar of width L has variance L^2 / 12
        ew = np.where(has, np.log(np.maximum(np.sqrt(12 * vx), 1.0) / self.aw), 0.0)
        eh = np.where(has, np.log(np.maximum(np.sqrt(12 * vy), 1.0) / self.ah), 0.0)
        inside = np.where(has, s_in / safe, 0.0)
        no_ring = m_in * (1 - m_ring)
        return np.stack(
            [m_in, m_core, m_ring, no_ring, cdx, cdy, ew, eh, m_win, m_in * m_in, no_ring * no_ring, inside],
            axis=1,
        )

    @property
    def dim(self) -> int:
        return len(self.names)


@dataclass
class TinyHeadModel:
    weights: np.ndarray  # (levels, d, 6)
    biases: np.ndarray  # (levels, 6)

    @classmethod
    def init(cls, levels: int, dim: int, cfg: TrainConfig, rng: np.random.Generator) -> "TinyHeadModel":
        w = cfg.init_std * rng.standard_normal((levels, dim, NUM_OUTPUTS))
        b = np.zeros((levels, NUM_OUTPUTS))
        b[:, 0] = -math.log((1 - cfg.prior) / cfg.prior)
        return cls(w, b)

    @property
    def num_params(self) -> int:
        return self.weights.size + self.biases.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.biases.ravel()])

    def with_flat(self, vec: np.ndarray) -> "TinyHeadModel":
        n = self.weights.size
        return TinyHeadModel(vec[:n].reshape(self.weights.shape).copy(), vec[n:].reshape(self.biases.shape).copy())

    def forward(self, feats: np.ndarray, level_slices) -> np.ndarray:
        out = np.empty((len(feats), NUM_OUTPUTS))
        for l, sl in enumerate(level_slices):
            out[sl] = feats[sl] @ self.weights[l] + self.biases[l]
        return out

    def backward(self, feats: np.ndarray, level_slices, grad_out: np.ndarray) -> np.ndarray:
        gw = np.empty_like(self.weights)
        gb = np.empty_like(self.biases)
        for l, sl in enumerate(level_slices):
            gw[l] = feats[sl].T @ grad_out[sl]
            gb[l] = grad_out[sl].sum(axis=0)
        return np.concatenate([gw.ravel(), gb.ravel()])

    # flat binary layout, little-endian:
    #   magic b"FDKH" | uint32 version | uint32 levels | uint32 dim | uint32 outputs
    #   | float64 weights[levels][dim][outputs] | float64 biases[levels][outputs]
    def to_bytes(self) -> bytes:
        levels, dim, outs = self.weights.shape
        head = MODEL_MAGIC + struct.pack("<4I", MODEL_VERSION, levels, dim, outs)
        return head + self.weights.astype("<f8").tobytes() + self.biases.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TinyHeadModel":
        if data[:4] != MODEL_MAGIC:
            raise ValueError("not a head-model file (bad magic)")
        version, levels, dim, outs = struct.unpack("<4I", data[4:20])
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        nw = levels * dim * outs
        body = np.frombuffer(data[20:], dtype="<f8")
        if body.size != nw + levels * outs:
            raise ValueError("model file size does not match its header")
        return cls(body[:nw].reshape(levels, dim, outs).copy(), body[nw:].reshape(levels, outs).copy())

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "TinyHeadModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class Pipeline:
    """Anchors, features and level layout for one synthetic image size."""

    def __init__(
        self,
        scene_cfg: SceneConfig = SceneConfig(),
        anchor_cfg: AnchorConfig = DEMO_ANCHORS,
        assigner_cfg: AssignerConfig = AssignerConfig(),
        focal: FocalConfig = FocalConfig(),
        weights: LossWeights = LossWeights(),
    ):
        self.scene_cfg = scene_cfg
        self.anchor_cfg = anchor_cfg
        self.assigner_cfg = assigner_cfg
        self.focal = focal
        self.loss_weights = weights
        grids = generate_anchors(anchor_cfg, scene_cfg.image_size, scene_cfg.image_size)
        self.anchors = flat_anchors(grids)
        bounds = np.cumsum([0] + [len(g) for g in grids])
        self.level_slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        self.features = FeatureExtractor(self.anchors, scene_cfg.image_size)

    @property
    def levels(self) -> int:
        return len(self.level_slices)

    def scene_inputs(self, scene: SyntheticScene):
        feats = self.features(scene.image)
        res = assign(self.anchors, scene.gts, self.assigner_cfg)
        return feats, res

    def loss_and_grad(self, model: TinyHeadModel, feats, res, gts, iou_targets=None):
        out = model.forward(feats, self.level_slices)
        bundle = total_loss(
            res, out[:, 0], out[:, 1:5], out[:, 5], self.anchors, gts, self.focal, self.loss_weights, iou_targets
        )
        grad_out = np.concatenate([bundle.grad_cls[:, None], bundle.grad_deltas, bundle.grad_iou[:, None]], axis=1)
        return bundle, model.backward(feats, self.level_slices, grad_out)

    def detect(self, model: TinyHeadModel, image: np.ndarray, cfg: TrainConfig) -> list[Detection]:
        feats = self.features(image)
        out = model.forward(feats, self.level_slices)
        cls = sigmoid(out[:, 0])
        ious = sigmoid(out[:, 5])
        fused = fuse_scores(cls, ious, cfg.fusion_alpha)
        cand = np.flatnonzero(fused >= cfg.score_thr)
        cand = cand[np.argsort(-fused[cand], kind="stable")][:1000]
        boxes, _ = decode_deltas_batch(self.anchors[cand], out[cand, 1:5])
        keep = nms_indices(boxes, fused[cand], cfg.nms_iou_thr)
        return [
            Detection(Box(*map(float, boxes[k])), float(cls[cand[k]]), float(ious[cand[k]]), float(fused[cand[k]]))
            for k in keep
        ]


def scene_seed(cfg: TrainConfig, iteration: int, index: int) -> tuple[int, int, int]:
    return (cfg.seed, iteration, index)


def heldout_seed(cfg: TrainConfig, index: int) -> tuple[int, int, int]:
    return (cfg.seed, 1_000_000_007, index)


def evaluate_model(model: TinyHeadModel, pipeline: Pipeline, cfg: TrainConfig) -> float:
    """AP@0.5 over the held-out synthetic scenes (every gt counts)."""
    records, preds = [], {}
    for k in range(cfg.heldout_scenes):
        scene = make_scene(heldout_seed(cfg, k), pipeline.scene_cfg)
        key = f"heldout/{k:04d}"
        records.append(ImageRecord(key + ".png", [FaceAnnotation(Box(*map(float, g))) for g in scene.gts]))
        preds[key] = pipeline.detect(model, scene.image, cfg)
    res = evaluate_run(preds, records, {"all": all_gt_lists(records)})
    return res["all"].ap


def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class TrainResult:
    history: list[dict]
    smoothed: np.ndarray
    model: TinyHeadModel
    initial_model: TinyHeadModel
    ap: float
    pipeline: Pipeline = field(repr=False)


HISTORY_COLUMNS = ("iteration", "lr", "total", "cls", "reg", "iou", "num_positives")


def train(cfg: TrainConfig = TrainConfig(), pipeline: Pipeline | None = None, evaluate: bool = True) -> TrainResult:
    pipeline = pipeline or Pipeline()
    rng = np.random.default_rng((cfg.seed, 17))
    model = TinyHeadModel.init(pipeline.levels, pipeline.features.dim, cfg, rng)
    initial = TinyHeadModel(model.weights.copy(), model.biases.copy())
    params = model.flat()
    velocity = np.zeros_like(params)
    history = []
    last_finite = float("nan")
    # overflow is caught below as divergence rather than warned about
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(cfg.total_iters):
            grad = np.zeros_like(params)
            parts = np.zeros(4)
            npos = 0
            current = model.with_flat(params)
            for b in range(cfg.batch_size):
                scene = make_scene(scene_seed(cfg, it, b), pipeline.scene_cfg)
                feats, res = pipeline.scene_inputs(scene)
                bundle, g = pipeline.loss_and_grad(current, feats, res, scene.gts)
                grad += g
                parts += (bundle.total, bundle.cls_loss, bundle.reg_loss, bundle.iou_loss)
                npos += bundle.num_positives
            grad /= cfg.batch_size
            parts /= cfg.batch_size
            if not np.all(np.isfinite(parts)) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(it, last_finite)
            last_finite = float(parts[0])
            lr = lr_at(it, cfg.iters_per_epoch, cfg)
            params, velocity = sgd_step(params, grad, velocity, lr, cfg)
            history.append(dict(zip(HISTORY_COLUMNS, (it, lr, *parts.tolist(), npos))))
            if it % 200 == 0:
                log.info("iter %d lr %.3g loss %.4f", it, lr, parts[0])
    model = model.with_flat(params)
    smoothed = smooth([h["total"] for h in history], cfg.smoothing_window)
    ap_value = evaluate_model(model, pipeline, cfg) if evaluate else float("nan")
    return TrainResult(history, smoothed, model, initial, ap_value, pipeline)
