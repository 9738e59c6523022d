"""
Fully-connected CRF with Gaussian spatial and bilateral kernels
Mean-field inference with exact O(N^2) message passing and Potts compatibility
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from models import (InvalidInputError, LabelMap, ProbMap, ScoreMap,
                    argmax_array, softmax_array)

logger = logging.getLogger(__name__)

# Rows of the kernel matrix built per block; bounds peak memory on larger images
KERNEL_BLOCK_ROWS = 512


@dataclass(frozen=True)
class CrfParams:
    """
    Kernel weights and bandwidths (colours in [0, 1], positions in pixels)

    Args:
        w_spatial: weight of the smoothness (spatial-only) kernel
        theta_gamma: bandwidth of the smoothness kernel
        w_bilateral: weight of the appearance (position + colour) kernel
        theta_alpha: spatial bandwidth of the appearance kernel
        theta_beta: colour bandwidth of the appearance kernel
        iterations: mean-field iterations
    """
    w_spatial: float = 3.0
    theta_gamma: float = 3.0
    w_bilateral: float = 5.0
    theta_alpha: float = 30.0
    theta_beta: float = 0.1
    iterations: int = 10

    def __post_init__(self):
        if self.w_spatial < 0 or self.w_bilateral < 0:
            raise InvalidInputError("CRF kernel weights must be non-negative")
        if min(self.theta_gamma, self.theta_alpha, self.theta_beta) <= 0:
            raise InvalidInputError("CRF bandwidths must be positive")
        if self.iterations < 0:
            raise InvalidInputError("CRF iterations must be non-negative")

    @property
    def inert(self) -> bool:
        return self.w_spatial == 0 and self.w_bilateral == 0


def kernel_matrix(image: np.ndarray, params: CrfParams) -> np.ndarray:
    """
    NxN pairwise kernel k(i, j) over row-major pixels, zero on the diagonal

    k = w_s exp(-|p_i - p_j|^2 / 2 tg^2) + w_b exp(-|p_i - p_j|^2 / 2 ta^2 - |I_i - I_j|^2 / 2 tb^2)
    """
    height, width, channels = image.shape
    rows, cols = np.mgrid[0:height, 0:width]
    positions = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    colors = image.reshape(-1, channels).astype(np.float64)
    n = positions.shape[0]

    kernel = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, KERNEL_BLOCK_ROWS):
        stop = min(start + KERNEL_BLOCK_ROWS, n)
        pos_d2 = ((positions[start:stop, None, :] - positions[None, :, :]) ** 2).sum(axis=-1)
        block = params.w_spatial * np.exp(-pos_d2 / (2.0 * params.theta_gamma ** 2))
        if params.w_bilateral > 0:
            col_d2 = ((colors[start:stop, None, :] - colors[None, :, :]) ** 2).sum(axis=-1)
            block += params.w_bilateral * np.exp(
                -pos_d2 / (2.0 * params.theta_alpha ** 2)
                - col_d2 / (2.0 * params.theta_beta ** 2))
        kernel[start:stop] = block
    np.fill_diagonal(kernel, 0.0)
    return kernel


def mean_field(unary: ScoreMap, image: np.ndarray, params: CrfParams,
               callback: Optional[Callable[[int, np.ndarray], None]] = None) -> ProbMap:
    """
    Mean-field approximation of the dense CRF posterior

    Args:
        unary: per-pixel scores (higher is more likely)
        image: HxWxC colours matching the unary's spatial size
        params: kernel parameters and iteration count
        callback: called as callback(iteration, Q) after every update, Q of shape HxWx(L+1)

    Returns:
        ProbMap of the final Q
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[:2] != (unary.height, unary.width):
        raise InvalidInputError(
            f"Image shape {image.shape} does not match unary {unary.height}x{unary.width}")

    scores = unary.data.reshape(-1, unary.num_labels)
    q = softmax_array(scores)
    if params.iterations == 0 or params.inert:
        return ProbMap(q.reshape(unary.data.shape))

    kernel = kernel_matrix(image, params)
    for iteration in range(params.iterations):
        message = kernel @ q
        # Potts: penalty is the kernel-weighted mass on every other label
        penalty = message.sum(axis=1, keepdims=True) - message
        q = softmax_array(scores - penalty)
        if callback is not None:
            callback(iteration, q.reshape(unary.data.shape))

    logger.debug("mean field finished after %d iterations", params.iterations)
    return ProbMap(q.reshape(unary.data.shape))


def crf_refine(scores: ScoreMap, image: np.ndarray, params: CrfParams) -> LabelMap:
    """Test-time smoothing: argmax of the mean-field marginals"""
    q = mean_field(scores, image, params)
    return LabelMap(argmax_array(q.data))
