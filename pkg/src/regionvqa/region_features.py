"""Region feature extraction: a small convolutional backbone, FPN fusion,
per-category NMS, top-K selection, RoIAlign and the two-layer embedding.

The attribute head is a training-time auxiliary branch; extraction never runs it.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import Module, Tensor, init_rng, no_grad, ops
from .numerics.nn import Linear, const_param, normal_param

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0
    category: int = 0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def _score_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on -score: ties keep the lower original index first
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_per_category(boxes: Sequence[Box], iou_threshold: float = 0.5) -> list[int]:
    """Greedy NMS run independently inside each category.

    Returns kept indices ordered by descending score.
    """
    n = len(boxes)
    if n == 0:
        return []
    coords = np.array([b.coords() for b in boxes], dtype=np.float64)
    scores = np.array([b.score for b in boxes], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: scores must be finite")
    cats = np.array([b.category for b in boxes])
    order = _score_order(scores)
    keep = np.zeros(n, dtype=bool)
    for c in np.unique(cats):
        idx = order[cats[order] == c]
        overlaps = pairwise_iou(coords[idx], coords[idx])
        suppressed = np.zeros(idx.size, dtype=bool)
        for i in range(idx.size):
            if suppressed[i]:
                continue
            keep[idx[i]] = True
            suppressed |= overlaps[i] > iou_threshold
    return [int(i) for i in order if keep[i]]


def top_k_indices(scores: Sequence[float], k: int) -> list[int]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return [int(i) for i in _score_order(np.asarray(scores))[:k]]


def select_top_k(boxes: Sequence[Box], k: int) -> list[Box]:
    """The ``min(k, len(boxes))`` highest-confidence boxes, score-descending."""
    return [boxes[i] for i in top_k_indices([b.score for b in boxes], k)] if boxes else []


# --- configuration ---------------------------------------------------------------------

@dataclass
class DetectorConfig:
    fpn_dim: int = 256
    embed_dim: int = 2048
    max_regions: int = 100
    iou_threshold: float = 0.5
    num_object_classes: int = 1600
    num_attribute_classes: int = 400
    attribute_head: bool = True
    multiscale: bool = False
    scales: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25)
    in_channels: int = 3
    backbone_channels: tuple[int, ...] = (64, 128, 256)
    pool_size: int = 7
    sampling_ratio: int = 2
    canonical_box_size: float = 16.0
    attribute_loss_weight: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.validate()

    def validate(self) -> None:
        if self.max_regions < 1:
            raise ConfigurationError("max_regions (K) must be >= 1")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigurationError("iou_threshold must lie strictly between 0 and 1")
        if self.num_object_classes < 1 or self.num_attribute_classes < 1:
            raise ConfigurationError("class counts must be >= 1")
        if min(self.fpn_dim, self.embed_dim, self.in_channels, self.pool_size, self.sampling_ratio) < 1:
            raise ConfigurationError("dimensions must be >= 1")
        if len(self.backbone_channels) < 1:
            raise ConfigurationError("backbone needs at least one stage")
        if self.multiscale and (not self.scales or min(self.scales) <= 0):
            raise ConfigurationError("multi-scale training needs positive scales")

    @classmethod
    def full_scale(cls, **overrides) -> "DetectorConfig":
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> "DetectorConfig":
        base = dict(fpn_dim=16, embed_dim=32, max_regions=8, num_object_classes=4, num_attribute_classes=4,
                    backbone_channels=(8, 16, 32), pool_size=3, canonical_box_size=8.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class RegionFeatureSet:
    """``K x D`` region embeddings plus the boxes they were pooled from."""

    boxes: list[Box]
    features: np.ndarray
    status: str = "ok"
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.boxes):
            raise DimensionError(f"{len(self.boxes)} boxes but features of shape {self.features.shape}")

    def __len__(self) -> int:
        return len(self.boxes)


# --- network pieces -----------------------------------------------------------------------

class Backbone(Module):
    """Stride-2 3x3 convolution stages with ReLU; returns every stage output."""

    def __init__(self, in_channels: int, channels: Sequence[int], seed: int, dtype=None):
        self.weights, self.biases = [], []
        prev = in_channels
        for i, c in enumerate(channels):
            rng = init_rng(seed, f"backbone.{i}")
            self.weights.append(normal_param(rng, (c, prev, 3, 3), math.sqrt(2.0 / (prev * 9)), dtype))
            self.biases.append(const_param((c,), 0.0, dtype))
            prev = c
        self.stages = len(self.weights)

    def named_parameters(self, prefix: str = ""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}stage{i}.weight", w
            yield f"{prefix}stage{i}.bias", b

    def __call__(self, image: Tensor) -> list[Tensor]:
        levels, x = [], image
        for w, b in zip(self.weights, self.biases):
            x = ops.relu(ops.conv2d(x, w, b, stride=2, padding=1))
            levels.append(x)
        return levels


class FeaturePyramid(Module):
    """Lateral 1x1 projections, top-down nearest upsample-and-add, 3x3 smoothing."""

    def __init__(self, in_channels: Sequence[int], fpn_dim: int, seed: int, dtype=None):
        self.in_channels = tuple(in_channels)
        self.fpn_dim = fpn_dim
        self.lateral_w, self.lateral_b, self.smooth_w, self.smooth_b = [], [], [], []
        for i, c in enumerate(self.in_channels):
            rng = init_rng(seed, f"fpn.lateral.{i}")
            self.lateral_w.append(normal_param(rng, (fpn_dim, c, 1, 1), math.sqrt(1.0 / c), dtype))
            self.lateral_b.append(const_param((fpn_dim,), 0.0, dtype))
            rng = init_rng(seed, f"fpn.smooth.{i}")
            self.smooth_w.append(normal_param(rng, (fpn_dim, fpn_dim, 3, 3), math.sqrt(1.0 / (9 * fpn_dim)), dtype))
            self.smooth_b.append(const_param((fpn_dim,), 0.0, dtype))

    def named_parameters(self, prefix: str = ""):
        for i in range(len(self.in_channels)):
            yield f"{prefix}lateral{i}.weight", self.lateral_w[i]
            yield f"{prefix}lateral{i}.bias", self.lateral_b[i]
            yield f"{prefix}smooth{i}.weight", self.smooth_w[i]
            yield f"{prefix}smooth{i}.bias", self.smooth_b[i]

    def __call__(self, levels: Sequence[Tensor]) -> list[Tensor]:
        return fpn_fuse(levels, self)


def fpn_fuse(backbone_levels: Sequence[Tensor], fpn: FeaturePyramid) -> list[Tensor]:
    """Fuse fine-to-coarse backbone maps into ``fpn.fpn_dim``-channel levels.

    Level ``i+1`` must have half the spatial size of level ``i`` (rounded up).
    """
    levels = list(backbone_levels)
    if len(levels) != len(fpn.in_channels):
        raise ConfigurationError(f"pyramid built for {len(fpn.in_channels)} levels, got {len(levels)}")
    for i, lvl in enumerate(levels):
        if lvl.ndim != 3 or lvl.shape[0] != fpn.in_channels[i]:
            raise ConfigurationError(f"level {i}: expected {fpn.in_channels[i]} channels, got shape {lvl.shape}")
        if i:
            prev = levels[i - 1].shape[1:]
            want = tuple(-(-s // 2) for s in prev)
            if tuple(lvl.shape[1:]) != want:
                raise ConfigurationError(f"level {i} size {lvl.shape[1:]} is not half of level {i - 1} size {prev}")
    lateral = [ops.conv2d(x, w, b) for x, w, b in zip(levels, fpn.lateral_w, fpn.lateral_b)]
    merged = [None] * len(lateral)
    merged[-1] = lateral[-1]
    for i in range(len(lateral) - 2, -1, -1):
        up = ops.upsample_nearest(merged[i + 1], lateral[i].shape[1:])
        merged[i] = ops.add(lateral[i], up)
    return [ops.conv2d(m, w, b, padding=1) for m, w, b in zip(merged, fpn.smooth_w, fpn.smooth_b)]


class RegionEmbedding(Module):
    """Flatten pooled regions, then FC -> ReLU -> FC to ``embed_dim``."""

    def __init__(self, in_features: int, embed_dim: int, seed: int, dtype=None):
        self.fc1 = Linear(in_features, embed_dim, init_rng(seed, "embed.fc1"), std=math.sqrt(2.0 / in_features),
                          dtype=dtype)
        self.fc2 = Linear(embed_dim, embed_dim, init_rng(seed, "embed.fc2"), std=math.sqrt(1.0 / embed_dim),
                          dtype=dtype)

    def __call__(self, pooled: Tensor) -> Tensor:
        return embed_regions(pooled, self)


def embed_regions(pooled: Tensor, embedding: RegionEmbedding) -> Tensor:
    if pooled.ndim < 2:
        raise DimensionError(f"embed_regions expects K x ... pooled input, got {pooled.shape}")
    flat = ops.reshape(pooled, (pooled.shape[0], -1))
    return embedding.fc2(ops.relu(embedding.fc1(flat)))


class RegionDetector(Module):
    """Backbone, pyramid, box embedding, object classifier and optional attribute head."""

    def __init__(self, config: DetectorConfig, dtype=None):
        self.config = config
        seed = config.seed
        self.backbone = Backbone(config.in_channels, config.backbone_channels, seed, dtype)
        self.pyramid = FeaturePyramid(config.backbone_channels, config.fpn_dim, seed, dtype)
        pooled = config.fpn_dim * config.pool_size * config.pool_size
        self.embedding = RegionEmbedding(pooled, config.embed_dim, seed, dtype)
        self.classifier = Linear(config.embed_dim, config.num_object_classes + 1, init_rng(seed, "cls"),
                                 std=0.01, dtype=dtype)
        self.attribute_head = (
            Linear(config.embed_dim, config.num_attribute_classes, init_rng(seed, "attr"), std=0.01, dtype=dtype)
            if config.attribute_head else None
        )

    @property
    def strides(self) -> list[int]:
        return [2 ** (i + 1) for i in range(len(self.config.backbone_channels))]

    def pyramid_levels(self, image: Tensor) -> list[Tensor]:
        return self.pyramid(self.backbone(image))

    def assign_levels(self, boxes: np.ndarray) -> np.ndarray:
        """Pyramid level per box from its scale: larger boxes pool from coarser maps."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        nlev = len(self.strides)
        side = np.sqrt(np.clip((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]), 1e-12, None))
        k = np.floor(nlev // 2 + np.log2(side / self.config.canonical_box_size + 1e-12))
        return np.clip(k, 0, nlev - 1).astype(np.int64)

    def pool(self, levels: Sequence[Tensor], boxes: np.ndarray) -> Tensor:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        lvl = self.assign_levels(boxes)
        size = (self.config.pool_size, self.config.pool_size)
        parts, order = [], []
        for k in np.unique(lvl):
            idx = np.nonzero(lvl == k)[0]
            parts.append(ops.roi_align(levels[k], boxes[idx], size, self.config.sampling_ratio,
                                       1.0 / self.strides[k]))
            order.append(idx)
        pooled = parts[0] if len(parts) == 1 else ops.concat(parts, axis=0)
        perm = np.concatenate(order)
        if np.array_equal(perm, np.arange(perm.size)):
            return pooled
        return ops.getitem(pooled, np.argsort(perm))

    def region_features(self, image: Tensor, boxes: np.ndarray) -> Tensor:
        return self.embedding(self.pool(self.pyramid_levels(image), boxes))

    def class_logits(self, features: Tensor) -> Tensor:
        return self.classifier(features)

    def attribute_logits(self, features: Tensor) -> Tensor:
        return attribute_logits(features, self)


def attribute_logits(region_features: Tensor, detector: RegionDetector) -> Tensor:
    """Attribute logits ``K x C_attr``; only valid while the attribute head exists."""
    if detector.attribute_head is None:
        raise ConfigurationError("attribute head is disabled in this detector configuration")
    return detector.attribute_head(region_features)


def score_candidates(class_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Object confidence (max non-background probability) and its category."""
    z = class_logits - class_logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    fg = p[:, 1:]
    cat = fg.argmax(axis=1)
    return np.clip(fg[np.arange(fg.shape[0]), cat], 0.0, 1.0), cat


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    return b


def extract_image_representation(image, candidates, detector: RegionDetector,
                                 config: DetectorConfig | None = None) -> RegionFeatureSet:
    """Score candidates, run per-category NMS, keep the top K and return their embeddings."""
    config = config or detector.config
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=detector.backbone.weights[0].dtype))
    _, h, w = image.shape
    cand = np.asarray(candidates, dtype=np.float64).reshape(-1, 4)
    if cand.size:
        cand = clip_boxes(cand, h, w)
        # f32 corners so boxes survive the feature file round trip unchanged
        cand = cand.astype(np.float32).astype(np.float64)
        cand = cand[(cand[:, 2] > cand[:, 0]) & (cand[:, 3] > cand[:, 1])]
    if cand.shape[0] == 0:
        msg = "no candidate boxes; returning an empty region set"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return RegionFeatureSet([], np.zeros((0, config.embed_dim), np.float32), status="empty", warnings=[msg])
    with no_grad():
        feats = detector.region_features(image, cand)
        scores, cats = score_candidates(np.asarray(detector.class_logits(feats).data, dtype=np.float64))
    scores = scores.astype(np.float32).astype(np.float64)
    boxes = [Box(*map(float, c), score=float(s), category=int(k)) for c, s, k in zip(cand, scores, cats)]
    kept = nms_per_category(boxes, config.iou_threshold)
    chosen = [kept[i] for i in top_k_indices([boxes[i].score for i in kept], config.max_regions)] if kept else []
    return RegionFeatureSet([boxes[i] for i in chosen], np.asarray(feats.data[chosen], dtype=np.float32))


def label_proposals(proposals: np.ndarray, gt_boxes: np.ndarray, gt_categories: np.ndarray,
                    gt_attributes: np.ndarray, fg_iou: float = 0.5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class label (0 = background), attribute label and foreground mask per proposal."""
    n = len(proposals)
    labels = np.zeros(n, dtype=np.int64)
    attrs = np.zeros(n, dtype=np.int64)
    if n == 0 or len(gt_boxes) == 0:
        return labels, attrs, np.zeros(n, dtype=bool)
    overlaps = pairwise_iou(proposals, gt_boxes)
    best = overlaps.argmax(axis=1)
    fg = overlaps[np.arange(n), best] >= fg_iou
    labels[fg] = np.asarray(gt_categories)[best[fg]] + 1
    attrs[fg] = np.asarray(gt_attributes)[best[fg]]
    return labels, attrs, fg


def detector_loss(detector: RegionDetector, image: Tensor, proposals: np.ndarray, labels: np.ndarray,
                  attributes: np.ndarray, foreground: np.ndarray) -> Tensor:
    """Object classification loss plus the weighted attribute loss on foreground boxes."""
    feats = detector.region_features(image, proposals)
    loss = ops.cross_entropy(detector.class_logits(feats), labels)
    if detector.attribute_head is not None and foreground.any():
        attr = ops.cross_entropy(detector.attribute_logits(feats), attributes, weights=foreground.astype(float))
        loss = ops.add(loss, ops.scale(attr, detector.config.attribute_loss_weight))
    return loss


def rescale_image(image: np.ndarray, boxes: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear resize of a ``C x H x W`` image; boxes scale by the realized ratio."""
    from scipy import ndimage

    if scale == 1.0:
        return image, np.asarray(boxes, dtype=np.float64)
    c, h, w = image.shape
    nh, nw = max(4, int(round(h * scale))), max(4, int(round(w * scale)))
    out = ndimage.zoom(image, (1, nh / h, nw / w), order=1, grid_mode=True, mode="nearest")
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, [0, 2]] *= out.shape[2] / w
    b[:, [1, 3]] *= out.shape[1] / h
    return out.astype(image.dtype), b


@dataclass
class DetectorSample:
    """One annotated image for detector training."""

    image: np.ndarray
    proposals: np.ndarray
    gt_boxes: np.ndarray
    gt_categories: np.ndarray
    gt_attributes: np.ndarray


def train_detector(detector: RegionDetector, samples: Sequence[DetectorSample], epochs: int = 5,
                   lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Fit the detector on labelled proposals; returns the mean loss per epoch.

    With ``config.multiscale`` each step rescales its image by a scale drawn
    uniformly from ``config.scales``.
    """
    from .numerics.optim import Adam

    if not samples:
        raise ValueError("train_detector needs at least one sample")
    cfg = detector.config
    rng = np.random.default_rng([seed, 7])
    opt = Adam({"detector": (detector.parameters(), lr)})
    dtype = detector.backbone.weights[0].dtype
    history = []
    detector.train()
    for _ in range(epochs):
        total = 0.0
        for i in rng.permutation(len(samples)):
            s = samples[i]
            image, props = s.image, s.proposals
            gt = np.asarray(s.gt_boxes, dtype=np.float64).reshape(-1, 4)
            if cfg.multiscale:
                scale = float(rng.choice(cfg.scales))
                image, both = rescale_image(image, np.concatenate([props, gt]), scale)
                props, gt = both[: len(props)], both[len(props):]
            props = clip_boxes(props, image.shape[1], image.shape[2])
            ok = (props[:, 2] > props[:, 0]) & (props[:, 3] > props[:, 1])
            props = props[ok]
            if props.shape[0] == 0:
                continue
            labels, attrs, fg = label_proposals(props, gt, s.gt_categories, s.gt_attributes)
            opt.zero_grad()
            loss = detector_loss(detector, Tensor(np.asarray(image, dtype=dtype)), props, labels, attrs, fg)
            if not np.isfinite(loss.item()):
                from .errors import DivergenceError
                raise DivergenceError("detector loss became non-finite")
            loss.backward()
            opt.step()
            total += loss.item()
        history.append(total / len(samples))
        log.debug("detector epoch loss %.4f", history[-1])
    detector.eval()
    return history
