"""
Hard-EM training loop
Each weak sample gets a fresh E-step estimate on every visit; strong and weak
samples are bundled into every mini-batch in a fixed proportion
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import (Boxes, ConfigError, ImageLevel, LabelMap, Sample,
                    ScoreMap, Strong, argmax_labels)
from segmentation.bboxlabels import BboxSegConfig, bbox_rect, bbox_seg
from segmentation.densecrf import CrfParams, crf_refine
from segmentation.estep import (DEFAULT_B_BG, DEFAULT_B_FG, DEFAULT_RHO_BG,
                                DEFAULT_RHO_FG, AdaptParams,
                                bbox_em_fixed_estep, em_adapt_estep,
                                em_fixed_estep)
from segmentation.evaluation import ConfusionMatrix, mean_iou
from segmentation.net import (NetConfig, NetParams, forward, init_params,
                              loss_and_grad, lr_multipliers, sgd_update)

logger = logging.getLogger(__name__)

IMAGE_MODES = ("em-fixed", "em-adapt")
BOX_MODES = ("bbox-rect", "bbox-seg", "bbox-em-fixed")
OFFLINE_BOX_MODES = ("bbox-rect", "bbox-seg")


@dataclass(frozen=True)
class EStepConfig:
    """Bias and quota parameters shared by the E-steps"""
    b_fg: float = DEFAULT_B_FG
    b_bg: float = DEFAULT_B_BG
    rho_fg: float = DEFAULT_RHO_FG
    rho_bg: float = DEFAULT_RHO_BG


@dataclass(frozen=True)
class TrainConfig:
    """
    Args:
        batch_size: images per SGD step
        strong_per_batch: strongly annotated images in every batch
        steps: SGD steps
        image_mode: E-step for image-level samples (em-fixed | em-adapt)
        box_mode: label source for box samples (bbox-rect | bbox-seg | bbox-em-fixed)
        lr, lr_final_mult: base learning rate and classifier-head multiplier
        lr_step, lr_gamma: multiply lr by lr_gamma every lr_step steps (0 disables)
        momentum, weight_decay: SGD parameters
        val_every: validation interval in steps (0 disables periodic validation)
        log_every: loss logging interval
        void_label: ground-truth label excluded from loss and metrics
        seed: batch drawing and E-step seed
    """
    batch_size: int = 20
    strong_per_batch: int = 0
    steps: int = 200
    image_mode: str = "em-adapt"
    box_mode: str = "bbox-seg"
    lr: float = 0.001
    lr_final_mult: float = 10.0
    lr_step: int = 0
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    val_every: int = 50
    log_every: int = 10
    void_label: Optional[int] = None
    seed: int = 0
    estep: EStepConfig = field(default_factory=EStepConfig)
    bbox_seg: BboxSegConfig = field(default_factory=BboxSegConfig)
    crf: CrfParams = field(default_factory=CrfParams)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if not 0 <= self.strong_per_batch <= self.batch_size:
            raise ConfigError(
                f"train.strong_per_batch ({self.strong_per_batch}) must lie in 0..batch_size ({self.batch_size})")
        if self.steps < 0 or self.lr_step < 0:
            raise ConfigError("train.steps and train.lr_step must be non-negative")
        if self.image_mode not in IMAGE_MODES:
            raise ConfigError(f"train.image_mode must be one of {IMAGE_MODES}, got '{self.image_mode}'")
        if self.box_mode not in BOX_MODES:
            raise ConfigError(f"train.box_mode must be one of {BOX_MODES}, got '{self.box_mode}'")

    def lr_at(self, step: int) -> float:
        if self.lr_step <= 0:
            return self.lr
        return self.lr * self.lr_gamma ** (step // self.lr_step)


@dataclass
class StepRecord:
    step: int
    loss: float
    miou: Optional[float]
    lr: float


@dataclass
class TrainingLog:
    """Metrics per step, the sample ids of every batch and the final evaluation"""
    records: List[StepRecord] = field(default_factory=list)
    batches: List[Tuple[str, ...]] = field(default_factory=list)
    final_miou: Optional[float] = None
    final_miou_crf: Optional[float] = None


# ==================== E-STEP DISPATCH ====================

def offline_box_target(sample: Sample, cfg: TrainConfig) -> LabelMap:
    """Bbox-Rect or Bbox-Seg estimate of a box sample (the pre-processing step)"""
    boxes = sample.annotation.boxes
    if cfg.box_mode == "bbox-rect":
        return bbox_rect(boxes, sample.height, sample.width)
    if cfg.box_mode == "bbox-seg":
        return bbox_seg(sample.image, boxes, cfg.bbox_seg, cfg.net.num_labels)
    raise ConfigError(f"Box mode '{cfg.box_mode}' has no offline estimate")


def precompute_offline_targets(dataset: Sequence[Sample], cfg: TrainConfig,
                               threads: int = 1) -> Dict[str, LabelMap]:
    """Estimated label maps for every box sample, computed once before training"""
    if cfg.box_mode not in OFFLINE_BOX_MODES:
        return {}
    box_samples = [s for s in dataset if isinstance(s.annotation, Boxes)]
    if not box_samples:
        return {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        targets = list(pool.map(lambda s: offline_box_target(s, cfg), box_samples))
    logger.info("estimated %s labels for %d box samples", cfg.box_mode, len(box_samples))
    return {sample.id: target for sample, target in zip(box_samples, targets)}


def estep_dispatch(scores: ScoreMap, sample: Sample, cfg: TrainConfig,
                   offline_targets: Optional[Dict[str, LabelMap]] = None,
                   visit_seed: int = 0) -> Tuple[LabelMap, np.ndarray]:
    """
    Training target for one sample given the current scores

    Returns:
        (target label map, ignore mask)
    """
    annotation = sample.annotation
    ignore = np.zeros((sample.height, sample.width), dtype=bool)
    if isinstance(annotation, Strong):
        target = annotation.label_map
        if cfg.void_label is not None:
            ignore = target.labels == cfg.void_label
        return target, ignore

    if isinstance(annotation, ImageLevel):
        params = cfg.estep
        if cfg.image_mode == "em-fixed":
            return em_fixed_estep(scores, annotation.weak, params.b_fg, params.b_bg), ignore
        if cfg.image_mode == "em-adapt":
            adapt = AdaptParams(params.rho_fg, params.rho_bg, visit_seed)
            return em_adapt_estep(scores, annotation.weak, adapt), ignore
        raise ConfigError(f"Image-level samples cannot use mode '{cfg.image_mode}'")

    if isinstance(annotation, Boxes):
        if cfg.box_mode == "bbox-em-fixed":
            target = bbox_em_fixed_estep(scores, annotation.boxes, cfg.estep.b_fg, cfg.estep.b_bg)
            return target, ignore
        if cfg.box_mode in OFFLINE_BOX_MODES:
            if offline_targets is not None and sample.id in offline_targets:
                return offline_targets[sample.id], ignore
            return offline_box_target(sample, cfg), ignore
        raise ConfigError(f"Box samples cannot use mode '{cfg.box_mode}'")

    raise ConfigError(f"Sample {sample.id}: unsupported annotation")


# ==================== EVALUATION ====================

def predict(params: NetParams, image: np.ndarray, crf: Optional[CrfParams] = None) -> LabelMap:
    """Argmax prediction, optionally refined by the dense CRF"""
    scores = forward(params, image)
    if crf is None:
        return argmax_labels(scores)
    return crf_refine(scores, image, crf)


def evaluate(params: NetParams, dataset: Sequence[Sample], crf: Optional[CrfParams] = None,
             void_label: Optional[int] = None, threads: int = 1) -> Tuple[List[Optional[float]], float]:
    """Dataset-level IOU over the strongly annotated samples"""
    strong = [s for s in dataset if isinstance(s.annotation, Strong)]
    if not strong:
        raise ConfigError("Evaluation needs strongly annotated samples")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        predictions = list(pool.map(lambda s: predict(params, s.image, crf), strong))
    cm = ConfusionMatrix(params.config.num_labels)
    for sample, prediction in zip(strong, predictions):
        cm.accumulate(sample.annotation.label_map, prediction, void_label)
    return mean_iou(cm)


# ==================== TRAINING ====================

class _Pool:
    """Sample indices drawn without replacement, reshuffled at every epoch"""

    def __init__(self, indices: List[int], rng: np.random.Generator):
        self.indices = np.array(indices, dtype=np.int64)
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.position = 0
        self.epoch = 0

    def draw(self, count: int) -> List[int]:
        drawn = []
        while len(drawn) < count:
            if self.position >= self.order.size:
                self.order = self.rng.permutation(self.indices)
                self.position = 0
                self.epoch += 1
            drawn.append(int(self.order[self.position]))
            self.position += 1
        return drawn


def _visit_seed(seed: int, step: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, step, slot]).generate_state(1)[0])


def run_training(dataset: Sequence[Sample], cfg: TrainConfig,
                 val_set: Optional[Sequence[Sample]] = None,
                 threads: int = 1,
                 initial: Optional[NetParams] = None,
                 on_step: Optional[Callable[[StepRecord], None]] = None,
                 on_target: Optional[Callable[[int, Sample, LabelMap], None]] = None
                 ) -> Tuple[NetParams, TrainingLog]:
    """
    Mini-batch hard-EM: forward, E-step, loss/gradient per sample, averaged SGD step

    Args:
        dataset: training samples of any annotation type
        cfg: training configuration
        val_set: strongly annotated samples for periodic and final mIOU
        threads: workers for the per-sample work inside a batch
        initial: starting parameters (default: fresh init from cfg.net)
        on_step: called with every StepRecord (metrics CSV)
        on_target: called as on_target(step, sample, target) for every E-step result

    Returns:
        (final parameters, training log)
    """
    if not dataset:
        raise ConfigError("Training needs a non-empty dataset")
    strong_idx = [i for i, s in enumerate(dataset) if isinstance(s.annotation, Strong)]
    weak_idx = [i for i, s in enumerate(dataset) if not isinstance(s.annotation, Strong)]
    n_strong = cfg.strong_per_batch
    if n_strong > 0 and not strong_idx:
        raise ConfigError("strong_per_batch > 0 but the dataset has no strongly annotated samples")
    if not weak_idx:
        if n_strong < cfg.batch_size:
            logger.info("no weak samples; every batch slot is filled with strong samples")
        n_strong = cfg.batch_size
    elif not strong_idx:
        n_strong = 0
    elif n_strong == 0:
        logger.warning("strong_per_batch is 0; the %d strongly annotated samples are never drawn",
                       len(strong_idx))
    n_weak = cfg.batch_size - n_strong

    params = initial if initial is not None else init_params(cfg.net)
    if params.config.num_labels != cfg.net.num_labels:
        raise ConfigError(
            f"Initial network predicts {params.config.num_labels} labels, task has {cfg.net.num_labels}")
    velocity = np.zeros_like(params.theta)
    lr_scale = lr_multipliers(params.config, cfg.lr_final_mult)

    strong_seq, weak_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    strong_pool = _Pool(strong_idx, np.random.default_rng(strong_seq))
    weak_pool = _Pool(weak_idx, np.random.default_rng(weak_seq))
    offline = precompute_offline_targets(dataset, cfg, threads)
    log = TrainingLog()

    def work(step: int, slot: int, sample: Sample, current: NetParams):
        scores = forward(current, sample.image)
        target, ignore = estep_dispatch(scores, sample, cfg, offline, _visit_seed(cfg.seed, step, slot))
        loss, grad = loss_and_grad(current, sample.image, target, ignore)
        return loss, grad, target

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for step in range(cfg.steps):
            indices = strong_pool.draw(n_strong) + weak_pool.draw(n_weak)
            batch = [dataset[i] for i in indices]
            log.batches.append(tuple(s.id for s in batch))

            current = params
            results = list(pool.map(lambda args: work(step, args[0], args[1], current),
                                    enumerate(batch)))
            grad = np.zeros_like(params.theta)
            losses = []
            for sample, (loss, sample_grad, target) in zip(batch, results):
                grad += sample_grad
                losses.append(loss)
                if on_target is not None:
                    on_target(step, sample, target)
            grad /= len(batch)

            lr = cfg.lr_at(step)
            params, velocity = sgd_update(params, velocity, grad, lr, cfg.momentum,
                                          cfg.weight_decay, lr_scale)

            miou = None
            last = step == cfg.steps - 1
            if val_set and cfg.val_every > 0 and ((step + 1) % cfg.val_every == 0 or last):
                _, miou = evaluate(params, val_set, None, cfg.void_label, threads)
                logger.info("step %d: validation mIOU %.4f", step + 1, miou)

            record = StepRecord(step + 1, float(np.mean(losses)), miou, lr)
            log.records.append(record)
            if on_step is not None:
                on_step(record)
            if cfg.log_every > 0 and ((step + 1) % cfg.log_every == 0 or last):
                logger.info("step %d/%d: loss %.5f lr %.2g", step + 1, cfg.steps, record.loss, lr)

    if val_set:
        _, log.final_miou = evaluate(params, val_set, None, cfg.void_label, threads)
        _, log.final_miou_crf = evaluate(params, val_set, cfg.crf, cfg.void_label, threads)
        logger.info("final validation mIOU %.4f (raw), %.4f (with CRF)",
                    log.final_miou, log.final_miou_crf)
    return params, log
