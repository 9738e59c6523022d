"""
E-step label inference for hard-EM training from weak annotations
EM-Fixed, EM-Adapt and Bbox-EM-Fixed all reduce to an argmax over biased scores
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from models import (BoxAnnotation, InvalidInputError, LabelMap, ScoreMap,
                    WeakLabels, argmax_array)

logger = logging.getLogger(__name__)

# Default biases and quotas for the fixed and adaptive variants
DEFAULT_B_FG = 5.0
DEFAULT_B_BG = 3.0
DEFAULT_RHO_FG = 0.20
DEFAULT_RHO_BG = 0.40
MASK64 = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class BiasVector:
    """Per-label biases b_l; -inf suppresses a label"""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 1:
            raise InvalidInputError("Bias vector must be 1-D")
        if not np.any(np.isfinite(values)):
            raise InvalidInputError("Bias vector needs at least one finite entry")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class AdaptParams:
    """
    Area quotas for EM-Adapt

    Args:
        rho_fg: minimum image fraction for each present foreground label
        rho_bg: minimum image fraction for background
        seed: seed of the foreground visiting order
    """
    rho_fg: float = DEFAULT_RHO_FG
    rho_bg: float = DEFAULT_RHO_BG
    seed: int = 0

    def __post_init__(self):
        for name, rho in (("rho_fg", self.rho_fg), ("rho_bg", self.rho_bg)):
            if not 0.0 < rho < 1.0:
                raise InvalidInputError(f"{name} must lie in (0, 1), got {rho}")

    def check_feasible(self, z: WeakLabels):
        """Background and a single foreground label cannot both take more than the image"""
        if len(z.foreground()) == 1 and self.rho_fg + self.rho_bg > 1.0:
            raise InvalidInputError(
                f"rho_fg + rho_bg must not exceed 1 with one foreground label "
                f"(got {self.rho_fg} + {self.rho_bg})")


def quota_count(rho: float, size: int) -> int:
    """ceil(rho * size), guarded against binary rounding of rho (0.7 * 10 -> 7)"""
    return max(1, math.ceil(round(rho * size, 9)))


def _check_bias_order(b_fg: float, b_bg: float, name: str):
    if not b_fg > b_bg > 0:
        logger.warning("%s expects b_fg > b_bg > 0, got b_fg=%s b_bg=%s", name, b_fg, b_bg)


def _check_weak(scores: ScoreMap, z: WeakLabels):
    if z.num_labels != scores.num_labels:
        raise InvalidInputError(
            f"Weak labels cover {z.num_labels} labels but scores have {scores.num_labels}")


# ==================== EM-FIXED ====================

def em_fixed_biases(z: WeakLabels, b_fg: float, b_bg: float) -> BiasVector:
    """b_l for present labels, 0 for absent ones (absent labels are not suppressed)"""
    values = np.where(z.present, b_fg, 0.0)
    values[0] = b_bg
    return BiasVector(values)


def em_fixed_estep(scores: ScoreMap, z: WeakLabels,
                   b_fg: float = DEFAULT_B_FG, b_bg: float = DEFAULT_B_BG) -> LabelMap:
    """Argmax of scores boosted by b_bg (background) and b_fg (present foreground)"""
    _check_weak(scores, z)
    _check_bias_order(b_fg, b_bg, "EM-Fixed")
    biases = em_fixed_biases(z, b_fg, b_bg)
    return LabelMap(argmax_array(scores.data + biases.values))


# ==================== EM-ADAPT ====================

def quota_threshold(diffs: Sequence[float], rho: float) -> float:
    """
    Smallest b with at least ceil(rho * len(diffs)) entries d <= b

    Uses introselect (np.partition), linear in the number of entries.
    """
    diffs = np.asarray(diffs, dtype=np.float64).ravel()
    if diffs.size == 0:
        raise InvalidInputError("quota_threshold needs at least one score difference")
    if not 0.0 < rho <= 1.0:
        raise InvalidInputError(f"rho must lie in (0, 1], got {rho}")
    if np.any(diffs < 0) or not np.all(np.isfinite(diffs)):
        raise InvalidInputError("Score differences must be finite and non-negative")
    kth = quota_count(rho, diffs.size) - 1
    return float(np.partition(diffs, kth)[kth])


def xorshift64(state: int) -> int:
    """One step of Marsaglia's 64-bit xorshift (13, 7, 17)"""
    state ^= (state << 13) & MASK64
    state ^= state >> 7
    state ^= (state << 17) & MASK64
    return state


def visit_order(z: WeakLabels, seed: int) -> List[int]:
    """
    Background first, then the present foreground labels shuffled by a seeded xorshift

    Fisher-Yates over integers only, so the order is the same on every platform.
    """
    order = list(z.foreground())
    state = (int(seed) * 0x9E3779B97F4A7C15 + 1) & MASK64 or 1
    for i in range(len(order) - 1, 0, -1):
        state = xorshift64(state)
        j = state % (i + 1)
        order[i], order[j] = order[j], order[i]
    return [0] + order


def _win_margin(scores: np.ndarray) -> float:
    # Keeps a label strictly ahead where d_m equals the threshold, despite rounding
    return 1e-9 * (1.0 + float(np.abs(scores).max()))


def em_adapt_biases(scores: ScoreMap, z: WeakLabels, params: AdaptParams) -> BiasVector:
    """
    Set b_l label by label so each visited label takes at least its quota

    Absent labels get -inf. When label l is visited, f_max includes the biases
    already assigned to earlier labels; unvisited present labels count with 0.
    Each b_l is quota_threshold(d, rho_l) plus a win margin of 1e-9 * (1 + max|f|),
    so pixels exactly at the threshold go to l rather than tie.
    """
    _check_weak(scores, z)
    params.check_feasible(z)
    data = scores.data.reshape(-1, scores.num_labels)
    biases = np.where(z.present, 0.0, -np.inf)
    margin = _win_margin(data)

    for label in visit_order(z, params.seed):
        rho = params.rho_bg if label == 0 else params.rho_fg
        f_max = (data + biases).max(axis=1)
        diffs = f_max - data[:, label]
        diffs = np.maximum(diffs, 0.0)
        biases[label] = quota_threshold(diffs, rho) + margin
        logger.debug("EM-Adapt label %d: bias %.6g (rho %.2f)", label, biases[label], rho)

    return BiasVector(biases)


def em_adapt_estep(scores: ScoreMap, z: WeakLabels,
                   params: Optional[AdaptParams] = None) -> LabelMap:
    """Argmax of scores plus adaptive biases; absent labels never win"""
    params = params or AdaptParams()
    biases = em_adapt_biases(scores, z, params)
    return LabelMap(argmax_array(scores.data + biases.values))


# ==================== BBOX-EM-FIXED ====================

def bbox_bias_map(boxes: BoxAnnotation, height: int, width: int, num_labels: int,
                  b_fg: float, b_bg: float) -> np.ndarray:
    """HxWx(L+1) bias array: b_bg everywhere on background, b_fg inside boxes of each class"""
    boxes.check_bounds(height, width)
    bias = np.zeros((height, width, num_labels), dtype=np.float64)
    bias[:, :, 0] = b_bg
    for box in boxes:
        if box.cls >= num_labels:
            raise InvalidInputError(f"Box class {box.cls} out of range for {num_labels} labels")
        bias[box.y0:box.y1 + 1, box.x0:box.x1 + 1, box.cls] = b_fg
    return bias


def bbox_em_fixed_estep(scores: ScoreMap, boxes: BoxAnnotation,
                        b_fg: float = DEFAULT_B_FG, b_bg: float = DEFAULT_B_BG) -> LabelMap:
    """EM-Fixed with the foreground boost gated to the boxes of each class"""
    _check_bias_order(b_fg, b_bg, "Bbox-EM-Fixed")
    bias = bbox_bias_map(boxes, scores.height, scores.width, scores.num_labels, b_fg, b_bg)
    return LabelMap(argmax_array(scores.data + bias))
