"""
Domain types and per-pixel primitives for the weak-segmentation toolkit
All types are immutable values: their numpy buffers are frozen on construction
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np


# ==================== ERRORS ====================

class WeakSegError(ValueError):
    """Base class for every error raised by the toolkit"""


class InvalidInputError(WeakSegError):
    """Shapes, label counts or values that violate an operation's contract"""


class ConfigError(WeakSegError):
    """Bad or inconsistent configuration"""


class DataError(WeakSegError):
    """Malformed dataset files or labels that cannot be mapped"""


class GenerationError(DataError):
    """Synthetic scene generation could not satisfy its constraints"""


class UndefinedMetricError(WeakSegError):
    """A metric has no defined value (e.g. no class ever seen)"""


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ==================== SCORE / PROBABILITY MAPS ====================

@dataclass(frozen=True, eq=False)
class ScoreMap:
    """
    Per-pixel, per-label scores f_m(l), laid out pixel-major as (H, W, L+1)

    Args:
        data: real array of shape (height, width, num_labels)
    """
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] < 1:
            raise InvalidInputError(f"Score map must be HxWx(L+1), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("Score map contains non-finite values")
        object.__setattr__(self, "data", _frozen(data, np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_labels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel categorical distributions, same layout as ScoreMap"""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidInputError(f"Probability map must be HxWx(L+1), got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data, np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_labels(self) -> int:
        return self.data.shape[2]


# ==================== LABELS ====================

@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel hard labels in {0..L}; ground truth or an E-step estimate"""
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise InvalidInputError(f"Label map must be 2-D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise InvalidInputError("Label map contains negative labels")
        object.__setattr__(self, "labels", _frozen(labels, np.int64))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def check_labels(self, num_labels: int, void_label: Optional[int] = None):
        """Raise unless every (non-void) entry is below num_labels"""
        labels = self.labels
        if void_label is not None:
            labels = labels[labels != void_label]
        if labels.size and labels.max() >= num_labels:
            raise InvalidInputError(
                f"Label {int(labels.max())} out of range for {num_labels} labels")

    def label_set(self) -> List[int]:
        return [int(v) for v in np.unique(self.labels)]


@dataclass(frozen=True, eq=False)
class WeakLabels:
    """Image-level presence bits z over {0..L}; background is always present"""
    present: np.ndarray

    def __post_init__(self):
        present = np.array(self.present, dtype=bool, copy=True)
        if present.ndim != 1 or present.size < 1:
            raise InvalidInputError("Weak labels need a 1-D presence vector with at least one entry")
        present[0] = True
        present.setflags(write=False)
        object.__setattr__(self, "present", present)

    @classmethod
    def from_labels(cls, labels: Iterable[int], num_labels: int) -> "WeakLabels":
        """Build from a list of present labels"""
        present = np.zeros(num_labels, dtype=bool)
        for label in labels:
            if not 0 <= int(label) < num_labels:
                raise InvalidInputError(f"Label {label} out of range for {num_labels} labels")
            present[int(label)] = True
        return cls(present)

    @property
    def num_labels(self) -> int:
        return self.present.size

    def labels(self) -> List[int]:
        return [int(l) for l in np.flatnonzero(self.present)]

    def foreground(self) -> List[int]:
        return [l for l in self.labels() if l > 0]


@dataclass(frozen=True)
class Box:
    """One annotated instance: class label plus inclusive rectangle x0,y0,x1,y1"""
    cls: int
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.cls < 1:
            raise InvalidInputError(f"Boxes never annotate background (class {self.cls})")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise InvalidInputError(f"Degenerate box {self.rect}")

    @property
    def rect(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)

    def inside(self, height: int, width: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 < width and self.y1 < height


@dataclass(frozen=True)
class BoxAnnotation:
    """Ordered list of boxes for one image; list order breaks area ties"""
    boxes: Tuple[Box, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def check_bounds(self, height: int, width: int):
        for box in self.boxes:
            if not box.inside(height, width):
                raise InvalidInputError(
                    f"Box {box.rect} of class {box.cls} outside {width}x{height} image")

    def classes(self) -> List[int]:
        return sorted({box.cls for box in self.boxes})


# ==================== SAMPLES ====================

@dataclass(frozen=True)
class Strong:
    label_map: LabelMap


@dataclass(frozen=True)
class ImageLevel:
    weak: WeakLabels


@dataclass(frozen=True)
class Boxes:
    boxes: BoxAnnotation


Annotation = Union[Strong, ImageLevel, Boxes]


@dataclass(frozen=True, eq=False)
class Instance:
    """A rendered object: class and full (pre-occlusion) mask, in painter's order"""
    cls: int
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _frozen(self.mask, bool))


@dataclass(frozen=True, eq=False)
class Sample:
    """
    One training or evaluation image with exactly one annotation variant

    Args:
        image: HxWxC array, channels in [0, 1]
        annotation: Strong, ImageLevel or Boxes
        id: sample identifier (no whitespace)
        instances: generator instances, kept for box derivation
    """
    image: np.ndarray
    annotation: Annotation
    id: str
    instances: Tuple[Instance, ...] = field(default=(), compare=False)

    def __post_init__(self):
        image = np.asarray(self.image)
        if image.ndim != 3:
            raise InvalidInputError(f"Sample {self.id}: image must be HxWxC, got {image.shape}")
        object.__setattr__(self, "image", _frozen(image, np.float64))
        object.__setattr__(self, "instances", tuple(self.instances))
        height, width = image.shape[:2]
        if isinstance(self.annotation, Strong):
            if self.annotation.label_map.labels.shape != (height, width):
                raise InvalidInputError(f"Sample {self.id}: label map does not match image size")
        elif isinstance(self.annotation, Boxes):
            self.annotation.boxes.check_bounds(height, width)
        elif not isinstance(self.annotation, ImageLevel):
            raise InvalidInputError(f"Sample {self.id}: unknown annotation {type(self.annotation).__name__}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def kind(self) -> str:
        """'strong', 'weak' or 'boxes' (manifest vocabulary)"""
        if isinstance(self.annotation, Strong):
            return "strong"
        if isinstance(self.annotation, ImageLevel):
            return "weak"
        return "boxes"

    def with_annotation(self, annotation: Annotation) -> "Sample":
        return Sample(self.image, annotation, self.id, self.instances)


# ==================== PRIMITIVES ====================

def softmax_array(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-pixel max subtraction"""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def pixel_distribution(scores: ScoreMap) -> ProbMap:
    """P(y_m | x) for every pixel, from the score map"""
    data = np.asarray(scores.data)
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("pixel_distribution needs finite scores")
    return ProbMap(softmax_array(data))


def argmax_array(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest label on ties
    return np.argmax(scores, axis=-1)


def argmax_labels(scores: ScoreMap) -> LabelMap:
    """Per-pixel argmax; exact ties go to the lowest label index"""
    return LabelMap(argmax_array(scores.data))
