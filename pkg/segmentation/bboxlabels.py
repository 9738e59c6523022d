"""
Training label estimation from bounding boxes (run once, before training)
Bbox-Rect fills the boxes; Bbox-Seg segments them with the dense CRF
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from models import (BoxAnnotation, InvalidInputError, LabelMap, ScoreMap,
                    argmax_array)
from segmentation.densecrf import CrfParams, mean_field

# Magnitude of a hard unary; indistinguishable from a delta after softmax
B_HARD = 100.0

Rect = Tuple[int, int, int, int]


@dataclass(frozen=True)
class BboxSegConfig:
    """
    Args:
        alpha: fraction of each box, around its centre, fixed to foreground
        crf: CRF used to label the rest of the box
        neutral_unary: score of the candidate labels in the unconstrained band
    """
    alpha: float = 0.20
    crf: CrfParams = field(default_factory=CrfParams)
    neutral_unary: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in (0, 1], got {self.alpha}")


def _area(rect: Rect) -> int:
    return (rect[2] - rect[0] + 1) * (rect[3] - rect[1] + 1)


def _paint_smallest_first(rects: Sequence[Rect], classes: Sequence[int],
                          height: int, width: int,
                          areas: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Label map where each pixel takes the covering rect of smallest area (earliest on ties)

    areas overrides the rect areas used for ranking; centre regions rank by their box.
    """
    labels = np.zeros((height, width), dtype=np.int64)
    areas = [_area(rect) for rect in rects] if areas is None else areas
    order = sorted(range(len(rects)), key=lambda i: (areas[i], i))
    # Paint the winners last
    for i in reversed(order):
        x0, y0, x1, y1 = rects[i]
        labels[y0:y1 + 1, x0:x1 + 1] = classes[i]
    return labels


def bbox_rect(boxes: BoxAnnotation, height: int, width: int) -> LabelMap:
    """Every pixel of a box is its class; overlaps go to the smallest box"""
    boxes.check_bounds(height, width)
    rects = [box.rect for box in boxes]
    classes = [box.cls for box in boxes]
    return LabelMap(_paint_smallest_first(rects, classes, height, width))


def center_region(rect: Rect, alpha: float) -> Rect:
    """Concentric sub-rectangle with each side scaled by sqrt(alpha), rounded up"""
    if not 0.0 < alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1], got {alpha}")
    x0, y0, x1, y1 = rect
    scale = math.sqrt(alpha)

    def shrink(lo: int, hi: int) -> Tuple[int, int]:
        side = hi - lo + 1
        inner = min(side, max(1, math.ceil(round(side * scale, 9))))
        start = lo + (side - inner) // 2
        return start, start + inner - 1

    cx0, cx1 = shrink(x0, x1)
    cy0, cy1 = shrink(y0, y1)
    return (cx0, cy0, cx1, cy1)


def bbox_seg_unary(boxes: BoxAnnotation, height: int, width: int, num_labels: int,
                   cfg: BboxSegConfig) -> Tuple[ScoreMap, np.ndarray, np.ndarray]:
    """
    Unary scores encoding the box constraints

    Returns:
        (unary, hard labels with -1 where unconstrained, per-pixel candidate-label mask)
    """
    boxes.check_bounds(height, width)
    for box in boxes:
        if box.cls >= num_labels:
            raise InvalidInputError(f"Box class {box.cls} out of range for {num_labels} labels")

    candidates = np.zeros((height, width, num_labels), dtype=bool)
    candidates[:, :, 0] = True
    inside = np.zeros((height, width), dtype=bool)
    for box in boxes:
        candidates[box.y0:box.y1 + 1, box.x0:box.x1 + 1, box.cls] = True
        inside[box.y0:box.y1 + 1, box.x0:box.x1 + 1] = True

    unary = np.where(candidates, cfg.neutral_unary, -B_HARD)
    hard = np.full((height, width), -1, dtype=np.int64)

    outside = ~inside
    unary[outside] = -B_HARD
    unary[outside, 0] = B_HARD
    hard[outside] = 0

    centers = [center_region(box.rect, cfg.alpha) for box in boxes]
    center_labels = _paint_smallest_first(centers, [box.cls for box in boxes], height, width,
                                          areas=[_area(box.rect) for box in boxes])
    in_center = center_labels > 0
    unary[in_center] = -B_HARD
    rows, cols = np.nonzero(in_center)
    unary[rows, cols, center_labels[in_center]] = B_HARD
    hard[in_center] = center_labels[in_center]

    return ScoreMap(unary), hard, candidates


def bbox_seg(image: np.ndarray, boxes: BoxAnnotation, cfg: BboxSegConfig,
             num_labels: Optional[int] = None) -> LabelMap:
    """
    Foreground/background segmentation inside boxes with the dense CRF

    Outside every box is background, each box centre is its class; the band in
    between is inferred. Hard-constrained pixels keep their label in the output.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    if num_labels is None:
        num_labels = max(boxes.classes(), default=0) + 1
    unary, hard, candidates = bbox_seg_unary(boxes, height, width, num_labels, cfg)
    q = mean_field(unary, image, cfg.crf)
    labels = argmax_array(np.where(candidates, q.data, -1.0))
    constrained = hard >= 0
    labels[constrained] = hard[constrained]
    return LabelMap(labels)
