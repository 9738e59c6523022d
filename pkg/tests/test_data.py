from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from models import (Box, BoxAnnotation, Boxes, ConfigError, DataError, ImageLevel,
                    Instance, LabelMap, Sample, Strong, WeakLabels)
from segmentation.data import (GenConfig, LabelRemap, boxes_from_instances, class_color,
                               derive_annotations, generate, join_datasets, remap,
                               visible_masks, weak_labels_from_mask)

SMALL = GenConfig(num_images=6, height=24, width=24, num_fg_classes=3,
                  min_size=6, max_size=12, seed=5)


@pytest.fixture(scope="module")
def scenes():
    return generate(SMALL)


class TestGenConfig:
    @pytest.mark.parametrize("kwargs", [
        {"num_fg_classes": 0}, {"max_size": 30}, {"min_shapes": 3, "max_shapes": 2},
        {"shape_kinds": ("star",)}, {"noise": -0.1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            replace(SMALL, **kwargs)


class TestGenerate:
    def test_deterministic(self, scenes):
        again = generate(SMALL)
        for a, b in zip(scenes, again):
            assert a.id == b.id
            assert_array_equal(a.image, b.image)
            assert_array_equal(a.annotation.label_map.labels, b.annotation.label_map.labels)

    def test_ids_and_shapes(self, scenes):
        assert [s.id for s in scenes] == [f"img{i:05d}" for i in range(6)]
        for sample in scenes:
            assert sample.image.shape == (24, 24, 3)
            assert sample.annotation.label_map.labels.max() <= 3

    def test_zero_shapes(self):
        for sample in generate(replace(SMALL, min_shapes=0, max_shapes=0)):
            assert not sample.annotation.label_map.labels.any()
            assert sample.instances == ()

    def test_label_map_matches_painters_order(self, scenes):
        for sample in scenes:
            painted = np.zeros((24, 24), dtype=int)
            for instance in sample.instances:
                painted[instance.mask] = instance.cls
            assert_array_equal(painted, sample.annotation.label_map.labels)

    def test_foreground_contrast(self, scenes):
        for sample in scenes:
            labels = sample.annotation.label_map.labels
            if not labels.any() or labels.all():
                continue
            mean = sample.image[labels == 0].mean(axis=0)
            distance = np.sqrt(((sample.image[labels > 0] - mean) ** 2).sum(axis=1))
            assert distance.min() >= SMALL.contrast

    def test_images_are_8_bit(self, scenes):
        for sample in scenes:
            assert_array_equal(np.round(sample.image * 255) / 255, sample.image)

    def test_palette_size_one_is_the_default_generator(self, scenes):
        for a, b in zip(scenes, generate(replace(SMALL, palette_size=1))):
            assert_array_equal(a.image, b.image)

    def test_palette_colours_belong_to_their_class(self):
        cfg = replace(SMALL, num_images=20, palette_size=3, noise=0.0)
        palettes = {cls: [class_color(cls, 3, v, 3) for v in range(3)] for cls in (1, 2, 3)}
        used = set()
        for sample in generate(cfg):
            labels = sample.annotation.label_map.labels
            for cls in np.unique(labels[labels > 0]):
                pixel = sample.image[labels == cls][0]
                distances = [np.abs(pixel - c).max() for c in palettes[int(cls)]]
                assert min(distances) <= 0.05 + 1 / 255
                used.add((int(cls), int(np.argmin(distances))))
        assert len({variant for _, variant in used}) > 1

    def test_palette_hues_interleave(self):
        hues = [class_color(cls, 2, v, 2) for v in range(2) for cls in (1, 2)]
        assert len({tuple(np.round(h, 6)) for h in hues}) == 4

    def test_palette_size_checked(self):
        with pytest.raises(ConfigError):
            replace(SMALL, palette_size=0)


class TestWeakLabels:
    def test_background_only(self):
        assert weak_labels_from_mask(LabelMap(np.zeros((3, 3), int)), 4).labels() == [0]

    def test_present_classes(self):
        gt = LabelMap(np.array([[1, 0], [3, 3]]))
        assert weak_labels_from_mask(gt, 4).labels() == [0, 1, 3]

    def test_matches_pixel_scan(self, rng):
        for _ in range(50):
            labels = rng.integers(0, 6, size=(5, 5)) * (rng.random(size=(5, 5)) < 0.3)
            expected = {0} | {int(v) for v in labels.ravel()}
            assert set(weak_labels_from_mask(LabelMap(labels), 6).labels()) == expected


class TestBoxes:
    def test_square(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:5, 2:5] = True
        assert boxes_from_instances([Instance(1, mask)]).boxes == (Box(1, 2, 2, 4, 4),)

    def test_hidden_instance_dropped(self):
        small = np.zeros((8, 8), dtype=bool)
        small[3:5, 3:5] = True
        big = np.zeros((8, 8), dtype=bool)
        big[1:7, 1:7] = True
        assert boxes_from_instances([Instance(1, small), Instance(2, big)]).boxes == (Box(2, 1, 1, 6, 6),)

    def test_boxes_tight_on_visible_pixels(self, scenes):
        for sample in scenes:
            visible = [m for m in visible_masks(sample.instances) if m.any()]
            boxes = boxes_from_instances(sample.instances).boxes
            assert len(boxes) == len(visible)
            for box, mask in zip(boxes, visible):
                rows, cols = np.nonzero(mask)
                assert (box.x0, box.y0, box.x1, box.y1) == (cols.min(), rows.min(), cols.max(), rows.max())
                # each side touches a visible pixel
                assert mask[:, box.x0].any() and mask[:, box.x1].any()
                assert mask[box.y0].any() and mask[box.y1].any()


class TestDeriveAnnotations:
    def test_weak(self, scenes):
        derived = derive_annotations(scenes, "weak", 4)
        for original, sample in zip(scenes, derived):
            assert isinstance(sample.annotation, ImageLevel)
            expected = sorted(set(original.annotation.label_map.label_set()) | {0})
            assert sample.annotation.weak.labels() == expected

    def test_strong_count(self, scenes):
        derived = derive_annotations(scenes, "boxes", 4, strong_count=2)
        assert [s.kind for s in derived] == ["strong"] * 2 + ["boxes"] * 4

    def test_unknown_kind(self, scenes):
        with pytest.raises(ConfigError):
            derive_annotations(scenes, "scribbles", 4)


def _strong(labels, sample_id="s"):
    labels = np.asarray(labels)
    return Sample(np.zeros(labels.shape + (3,)), Strong(LabelMap(labels)), sample_id)


class TestRemap:
    def test_identity(self, scenes):
        for a, b in zip(scenes, remap(scenes, LabelRemap.identity(4))):
            assert_array_equal(a.annotation.label_map.labels, b.annotation.label_map.labels)

    def test_drop_class(self):
        image = np.zeros((4, 4, 3))
        dataset = [
            _strong([[0, 2], [1, 2]]),
            Sample(image, ImageLevel(WeakLabels.from_labels([1, 2], 3)), "w"),
            Sample(image, Boxes(BoxAnnotation((Box(2, 0, 0, 1, 1), Box(1, 2, 2, 3, 3)))), "b"),
        ]
        out = remap(dataset, LabelRemap({1: 1, 2: None}, 3))
        assert_array_equal(out[0].annotation.label_map.labels, [[0, 0], [1, 0]])
        assert out[1].annotation.weak.labels() == [0, 1]
        assert out[2].annotation.boxes.boxes == (Box(1, 2, 2, 3, 3),)

    def test_unmapped_label(self):
        with pytest.raises(DataError):
            remap([_strong([[0, 3]])], LabelRemap({1: 1}, 2))

    def test_join_counts(self, rng):
        a = [_strong(rng.integers(0, 3, size=(5, 5)), f"a{i}") for i in range(3)]
        b = [_strong(rng.integers(0, 3, size=(5, 5)), f"b{i}") for i in range(3)]
        map_a = LabelRemap({1: 1, 2: 2}, 5)
        map_b = LabelRemap({1: 1, 2: 4}, 5)
        joined = join_datasets([(a, map_a), (b, map_b)])
        assert [s.id for s in joined] == [f"src0_a{i}" for i in range(3)] + [f"src1_b{i}" for i in range(3)]

        counts = np.zeros(5, dtype=int)
        for sample in joined:
            counts += np.bincount(sample.annotation.label_map.labels.ravel(), minlength=5)
        expected = np.zeros(5, dtype=int)
        for dataset, mapping in ((a, map_a), (b, map_b)):
            for sample in dataset:
                for src, n in enumerate(np.bincount(sample.annotation.label_map.labels.ravel(), minlength=3)):
                    expected[mapping.target(src)] += n
        assert_array_equal(counts, expected)

    def test_join_needs_shared_label_space(self):
        with pytest.raises(ConfigError):
            join_datasets([([], LabelRemap({}, 3)), ([], LabelRemap({}, 4))])
