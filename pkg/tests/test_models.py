import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from models import (Box, BoxAnnotation, Boxes, ImageLevel, InvalidInputError,
                    LabelMap, Sample, ScoreMap, Strong, WeakLabels,
                    argmax_labels, pixel_distribution)


def _scores(*pixel):
    return ScoreMap(np.array(pixel, dtype=float).reshape(1, 1, -1))


class TestPixelDistribution:
    def test_uniform_scores(self):
        assert_allclose(pixel_distribution(_scores(0, 0, 0)).data[0, 0], [1 / 3] * 3)

    def test_large_scores_do_not_overflow(self):
        q = pixel_distribution(_scores(1000, 1000, 999)).data[0, 0]
        assert np.all(np.isfinite(q))
        assert_allclose(q, [0.422319, 0.422319, 0.155362], atol=1e-6)

    def test_two_label_split(self):
        assert_allclose(pixel_distribution(_scores(0, math.log(3))).data[0, 0], [0.25, 0.75])

    def test_rows_normalised(self, rng):
        for _ in range(1000):
            shape = tuple(int(v) for v in rng.integers(1, 6, size=2)) + (int(rng.integers(2, 7)),)
            q = pixel_distribution(ScoreMap(rng.normal(scale=20, size=shape))).data
            assert_allclose(q.sum(axis=-1), 1.0, atol=1e-9)
            assert q.min() >= 0 and q.max() <= 1

    def test_per_pixel_shift_invariant(self, rng):
        for _ in range(200):
            data = rng.normal(scale=10, size=(4, 5, 3))
            shift = rng.uniform(-50, 50, size=(4, 5, 1))
            assert_allclose(pixel_distribution(ScoreMap(data + shift)).data,
                            pixel_distribution(ScoreMap(data)).data, rtol=0, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            ScoreMap(np.array([[[0.0, np.inf]]]))


class TestArgmax:
    def test_tie_goes_to_lowest_label(self):
        assert argmax_labels(_scores(2.0, 5.0, 5.0)).labels[0, 0] == 1

    def test_background_wins(self):
        assert argmax_labels(_scores(7, 1, 1)).labels[0, 0] == 0

    def test_matches_pixel_scan(self, rng):
        data = rng.normal(size=(2, 2, 4))
        labels = argmax_labels(ScoreMap(data)).labels
        for r in range(2):
            for c in range(2):
                assert labels[r, c] == max(range(4), key=lambda l: data[r, c, l])

    def test_per_pixel_shift_invariant(self, rng):
        for _ in range(200):
            # dyadic scores and integer shifts add exactly, so ties survive the shift
            data = rng.integers(-40, 40, size=(5, 4, 4)) / 8.0
            shift = rng.integers(-1000, 1000, size=(5, 4, 1)).astype(float)
            assert_array_equal(argmax_labels(ScoreMap(data + shift)).labels,
                               argmax_labels(ScoreMap(data)).labels)


class TestLabels:
    def test_label_map_is_read_only(self):
        label_map = LabelMap(np.zeros((2, 2), dtype=int))
        with pytest.raises(ValueError):
            label_map.labels[0, 0] = 1

    def test_check_labels_respects_void(self):
        label_map = LabelMap(np.array([[0, 255], [1, 2]]))
        label_map.check_labels(3, void_label=255)
        with pytest.raises(InvalidInputError):
            label_map.check_labels(3)

    def test_weak_labels_force_background(self):
        weak = WeakLabels(np.array([False, True, False]))
        assert weak.labels() == [0, 1]
        assert weak.foreground() == [1]

    def test_weak_labels_range_checked(self):
        with pytest.raises(InvalidInputError):
            WeakLabels.from_labels([4], 3)


class TestBoxes:
    def test_background_box_rejected(self):
        with pytest.raises(InvalidInputError):
            Box(0, 0, 0, 1, 1)

    def test_degenerate_box_rejected(self):
        with pytest.raises(InvalidInputError):
            Box(1, 3, 0, 2, 1)

    def test_area_is_inclusive(self):
        assert Box(1, 2, 2, 4, 4).area == 9

    def test_out_of_bounds_sample_rejected(self):
        boxes = BoxAnnotation((Box(1, 0, 0, 4, 4),))
        with pytest.raises(InvalidInputError):
            Sample(np.zeros((4, 4, 3)), Boxes(boxes), "a")


class TestSample:
    def test_kind(self):
        image = np.zeros((3, 3, 3))
        assert Sample(image, Strong(LabelMap(np.zeros((3, 3), int))), "s").kind == "strong"
        assert Sample(image, ImageLevel(WeakLabels.from_labels([1], 2)), "w").kind == "weak"
        assert Sample(image, Boxes(BoxAnnotation()), "b").kind == "boxes"

    def test_label_map_size_checked(self):
        with pytest.raises(InvalidInputError):
            Sample(np.zeros((3, 3, 3)), Strong(LabelMap(np.zeros((2, 3), int))), "s")

    def test_with_annotation_keeps_image(self):
        image = np.full((2, 2, 3), 0.5)
        sample = Sample(image, Strong(LabelMap(np.ones((2, 2), int))), "s")
        weak = sample.with_annotation(ImageLevel(WeakLabels.from_labels([1], 2)))
        assert weak.id == "s"
        assert_array_equal(weak.image, image)
