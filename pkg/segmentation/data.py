"""
Synthetic datasets with exact ground truth, weak-annotation derivation and label remapping
"""

import colorsys
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from models import (Box, BoxAnnotation, Boxes, ConfigError, DataError,
                    GenerationError, ImageLevel, Instance, InvalidInputError,
                    LabelMap, Sample, Strong, WeakLabels)

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("rect", "disc", "triangle")
MIN_SHAPE_PIXELS = 4
PLACEMENT_TRIES = 20
SCENE_TRIES = 10


@dataclass(frozen=True)
class GenConfig:
    """
    Args:
        num_images: number of scenes
        height, width: image size in pixels
        num_fg_classes: L, foreground classes (labels 1..L)
        min_shapes, max_shapes: shapes per image (inclusive)
        min_size, max_size: shape bounding-box side in pixels
        shape_kinds: subset of rect, disc, triangle
        palette_size: colours per class; hues of all classes interleave around the colour wheel
        noise: amplitude of the per-pixel colour noise
        contrast: minimum colour distance of every object pixel to the background mean
        seed: dataset seed; image i uses the stream (seed, i)
    """
    num_images: int = 20
    height: int = 48
    width: int = 48
    num_fg_classes: int = 5
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: int = 8
    max_size: int = 20
    shape_kinds: Tuple[str, ...] = SHAPE_KINDS
    noise: float = 0.04
    contrast: float = 0.3
    palette_size: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape_kinds", tuple(self.shape_kinds))
        if self.num_fg_classes < 1:
            raise ConfigError("gen.num_fg_classes must be at least 1")
        if self.num_images < 0 or self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise ConfigError("Invalid image or shape counts in gen config")
        if not 1 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise ConfigError(
                f"Shape sizes {self.min_size}..{self.max_size} must fit a {self.width}x{self.height} image")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ConfigError(f"Unknown shape kinds: {sorted(unknown)}")
        if self.noise < 0 or self.contrast < 0:
            raise ConfigError("gen.noise and gen.contrast must be non-negative")
        if self.palette_size < 1:
            raise ConfigError(f"gen.palette_size must be at least 1, got {self.palette_size}")

    @property
    def num_labels(self) -> int:
        return self.num_fg_classes + 1


@dataclass(frozen=True)
class LabelRemap:
    """
    Source label -> target label, or None to drop the class

    Args:
        mapping: total over the labels that occur in the source data
        num_labels: size of the target label space
    """
    mapping: Dict[int, Optional[int]] = field(default_factory=dict)
    num_labels: int = 1

    def __post_init__(self):
        if self.mapping.get(0, 0) != 0:
            raise InvalidInputError("Background must map to background")
        for src, dst in self.mapping.items():
            if dst is not None and not 0 <= dst < self.num_labels:
                raise InvalidInputError(f"Label {src} maps to {dst}, outside {self.num_labels} labels")

    def target(self, label: int) -> Optional[int]:
        if label == 0:
            return 0
        if label not in self.mapping:
            raise DataError(f"Label {label} has no entry in the remap")
        return self.mapping[label]

    @classmethod
    def identity(cls, num_labels: int) -> "LabelRemap":
        return cls({l: l for l in range(num_labels)}, num_labels)


# ==================== GENERATION ====================

def class_color(label: int, num_fg_classes: int, variant: int = 0,
                palette_size: int = 1) -> np.ndarray:
    """Fixed saturated colour per (class, variant); neighbouring hues belong to different classes"""
    hue = ((label - 1) + variant * num_fg_classes) / (num_fg_classes * palette_size)
    return np.array(colorsys.hsv_to_rgb(hue, 1.0, 0.9))


def _shape_mask(kind: str, height: int, width: int, rng: np.random.Generator,
                cfg: GenConfig) -> np.ndarray:
    side_w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    side_h = side_w if kind == "disc" else int(rng.integers(cfg.min_size, cfg.max_size + 1))
    x0 = int(rng.integers(0, width - side_w + 1))
    y0 = int(rng.integers(0, height - side_h + 1))
    x1, y1 = x0 + side_w - 1, y0 + side_h - 1

    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    if kind == "rect":
        draw.rectangle([x0, y0, x1, y1], fill=1)
    elif kind == "disc":
        draw.ellipse([x0, y0, x1, y1], fill=1)
    else:
        draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) / 2.0, y0)], fill=1)
    return np.array(canvas) > 0


def _place_shape(rng: np.random.Generator, cfg: GenConfig, index: int) -> np.ndarray:
    for _ in range(PLACEMENT_TRIES):
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        mask = _shape_mask(kind, cfg.height, cfg.width, rng, cfg)
        if mask.sum() >= MIN_SHAPE_PIXELS:
            return mask
    raise GenerationError(f"Image {index}: could not place a shape of at least {MIN_SHAPE_PIXELS} pixels")


def _render_scene(rng: np.random.Generator, cfg: GenConfig, index: int):
    height, width = cfg.height, cfg.width
    base = rng.uniform(0.05, 0.3, size=3)
    image = base + rng.uniform(-cfg.noise, cfg.noise, size=(height, width, 3))
    labels = np.zeros((height, width), dtype=np.int64)
    instances = []
    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        cls = int(rng.integers(1, cfg.num_fg_classes + 1))
        mask = _place_shape(rng, cfg, index)
        variant = int(rng.integers(cfg.palette_size)) if cfg.palette_size > 1 else 0
        color = class_color(cls, cfg.num_fg_classes, variant, cfg.palette_size)
        color = color + rng.uniform(-0.05, 0.05, size=3)
        image[mask] = color + rng.uniform(-cfg.noise, cfg.noise, size=(int(mask.sum()), 3))
        labels[mask] = cls
        instances.append(Instance(cls, mask))
    # 8-bit quantisation so the on-disk form is exact
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image, labels, instances


def _has_contrast(image: np.ndarray, labels: np.ndarray, contrast: float) -> bool:
    background = labels == 0
    foreground = ~background
    if not background.any() or not foreground.any():
        return True
    mean = image[background].mean(axis=0)
    distance = np.sqrt(((image[foreground] - mean) ** 2).sum(axis=1))
    return bool(distance.min() >= contrast)


def generate_one(cfg: GenConfig, index: int, prefix: str = "img") -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    for _ in range(SCENE_TRIES):
        image, labels, instances = _render_scene(rng, cfg, index)
        if _has_contrast(image, labels, cfg.contrast):
            return Sample(image, Strong(LabelMap(labels)), f"{prefix}{index:05d}", tuple(instances))
    raise GenerationError(
        f"Image {index}: no scene with object contrast >= {cfg.contrast} after {SCENE_TRIES} tries")


def generate(cfg: GenConfig, prefix: str = "img") -> List[Sample]:
    """Strongly annotated scenes; deterministic per (seed, image index)"""
    samples = [generate_one(cfg, index, prefix) for index in range(cfg.num_images)]
    logger.info("generated %d images of %dx%d with %d foreground classes",
                len(samples), cfg.height, cfg.width, cfg.num_fg_classes)
    return samples


# ==================== WEAK ANNOTATIONS ====================

def weak_labels_from_mask(gt: LabelMap, num_labels: Optional[int] = None) -> WeakLabels:
    """z_l = 1 iff some pixel has label l; background always set"""
    present = gt.label_set()
    if num_labels is None:
        num_labels = max(present, default=0) + 1
    return WeakLabels.from_labels(present + [0], num_labels)


def visible_masks(instances: Sequence[Instance]) -> List[np.ndarray]:
    """Each instance minus everything painted after it"""
    visible = []
    covered = None
    for instance in reversed(instances):
        mask = instance.mask if covered is None else instance.mask & ~covered
        visible.append(mask)
        covered = instance.mask.copy() if covered is None else covered | instance.mask
    return visible[::-1]


def boxes_from_instances(instances: Sequence[Instance]) -> BoxAnnotation:
    """Tight box around the visible pixels of each instance; hidden instances are dropped"""
    boxes = []
    for instance, mask in zip(instances, visible_masks(instances)):
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            continue
        boxes.append(Box(instance.cls, int(cols.min()), int(rows.min()),
                         int(cols.max()), int(rows.max())))
    return BoxAnnotation(tuple(boxes))


def derive_annotations(samples: Sequence[Sample], kind: str, num_labels: int,
                       strong_count: int = 0) -> List[Sample]:
    """
    Replace strong annotations by image-level labels or boxes

    Args:
        samples: strongly annotated samples (boxes need their instances)
        kind: 'strong', 'weak' or 'boxes'
        num_labels: L+1
        strong_count: leading samples that keep their strong annotation
    """
    if kind not in ("strong", "weak", "boxes"):
        raise ConfigError(f"Unknown annotation kind '{kind}'")
    derived = []
    for position, sample in enumerate(samples):
        if kind == "strong" or position < strong_count:
            derived.append(sample)
            continue
        if not isinstance(sample.annotation, Strong):
            raise DataError(f"Sample {sample.id}: weak annotations derive from strong ones")
        if kind == "weak":
            weak = weak_labels_from_mask(sample.annotation.label_map, num_labels)
            derived.append(sample.with_annotation(ImageLevel(weak)))
        else:
            if not sample.instances:
                labels = sample.annotation.label_map.labels
                if labels.any():
                    raise DataError(f"Sample {sample.id}: boxes need the generator instances")
            derived.append(sample.with_annotation(Boxes(boxes_from_instances(sample.instances))))
    return derived


# ==================== REMAPPING ====================

def _remap_sample(sample: Sample, remap: LabelRemap) -> Sample:
    annotation = sample.annotation
    if isinstance(annotation, Strong):
        labels = annotation.label_map.labels
        lookup = {int(l): remap.target(int(l)) for l in np.unique(labels)}
        out = np.zeros_like(labels)
        for src, dst in lookup.items():
            if dst:
                out[labels == src] = dst
        annotation = Strong(LabelMap(out))
    elif isinstance(annotation, ImageLevel):
        targets = [remap.target(l) for l in annotation.weak.labels()]
        annotation = ImageLevel(WeakLabels.from_labels(
            [0] + [t for t in targets if t is not None], remap.num_labels))
    else:
        kept = []
        for box in annotation.boxes:
            dst = remap.target(box.cls)
            if dst:
                kept.append(Box(dst, box.x0, box.y0, box.x1, box.y1))
        annotation = Boxes(BoxAnnotation(tuple(kept)))

    instances = []
    for instance in sample.instances:
        dst = remap.target(instance.cls)
        if dst:
            instances.append(Instance(dst, instance.mask))
    return Sample(sample.image, annotation, sample.id, tuple(instances))


def remap(dataset: Sequence[Sample], label_remap: LabelRemap) -> List[Sample]:
    """Rewrite labels into a new label space; dropped classes become background"""
    return [_remap_sample(sample, label_remap) for sample in dataset]


def join_datasets(parts: Sequence[Tuple[Sequence[Sample], LabelRemap]],
                  prefixes: Optional[Sequence[str]] = None) -> List[Sample]:
    """
    Union of several datasets remapped into one shared label space

    Ids are prefixed per source so they stay unique.
    """
    if not parts:
        return []
    num_labels = {remapping.num_labels for _, remapping in parts}
    if len(num_labels) != 1:
        raise ConfigError("Joined datasets must remap into the same label space")
    prefixes = prefixes or [f"src{i}_" for i in range(len(parts))]
    joined = []
    for prefix, (dataset, remapping) in zip(prefixes, parts):
        for sample in remap(dataset, remapping):
            joined.append(Sample(sample.image, sample.annotation, prefix + sample.id, sample.instances))
    return joined
