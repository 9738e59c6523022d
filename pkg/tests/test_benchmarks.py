"""
Qualitative orderings on the synthetic benchmarks (200 train / 50 test, 48x48, 5 classes)
Each test trains several networks; run with --runslow
"""

from dataclasses import replace

import pytest

from segmentation.data import GenConfig, derive_annotations, generate
from segmentation.densecrf import CrfParams
from segmentation.net import NetConfig
from segmentation.train import EStepConfig, TrainConfig, evaluate, run_training

pytestmark = pytest.mark.slow

# Three interleaved hues per class: 20 strong images miss some of them, the weak images do not
PALETTE = GenConfig(num_images=200, height=48, width=48, num_fg_classes=5,
                    max_shapes=2, palette_size=3, seed=0)
BOXES = GenConfig(num_images=200, height=48, width=48, num_fg_classes=5, seed=0)
BASE = TrainConfig(batch_size=20, steps=300, lr=0.01, lr_step=200, val_every=0, log_every=50,
                   net=NetConfig(channels=(16, 16), kernel_sizes=(3, 3), num_labels=6),
                   estep=EStepConfig(b_fg=5, b_bg=3, rho_fg=0.2, rho_bg=0.4), seed=0)


def _splits(cfg):
    return generate(cfg, "train"), generate(replace(cfg, num_images=50, seed=cfg.seed + 1), "test")


@pytest.fixture(scope="module")
def palette():
    return _splits(PALETTE)


@pytest.fixture(scope="module")
def boxes():
    return _splits(BOXES)


def _miou(train_set, test_set, crf=None, **changes):
    params, _ = run_training(train_set, replace(BASE, **changes), threads=4)
    return evaluate(params, test_set, crf, threads=4)[1], params


def test_em_adapt_beats_em_fixed_on_image_labels(palette):
    train, test = palette
    weak = derive_annotations(train, "weak", PALETTE.num_labels)
    fixed, _ = _miou(weak, test, image_mode="em-fixed")
    adapt, _ = _miou(weak, test, image_mode="em-adapt")
    assert adapt >= fixed + 0.05


def test_weak_images_add_to_few_strong_ones(palette):
    train, test = palette
    strong_only, _ = _miou(train[:20], test)
    semi = derive_annotations(train, "weak", PALETTE.num_labels, strong_count=20)
    # b_fg - b_bg stays below the background margin the strong half of each batch teaches
    mixed, _ = _miou(semi, test, image_mode="em-fixed", strong_per_batch=10,
                     estep=EStepConfig(b_fg=5, b_bg=4.5))
    assert mixed >= strong_only + 0.02


def test_bbox_seg_labels_beat_filled_rectangles(boxes):
    train, test = boxes
    annotated = derive_annotations(train, "boxes", BOXES.num_labels)
    rect, _ = _miou(annotated, test, box_mode="bbox-rect")
    seg, _ = _miou(annotated, test, box_mode="bbox-seg")
    assert seg >= rect + 0.03


def test_crf_refinement_does_not_hurt(palette):
    train, test = palette
    weak = derive_annotations(train, "weak", PALETTE.num_labels)
    raw, params = _miou(weak, test, image_mode="em-adapt")
    refined = evaluate(params, test, CrfParams(), threads=4)[1]
    assert refined >= raw
