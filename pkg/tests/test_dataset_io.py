import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from models import Box, BoxAnnotation, DataError, InvalidInputError, LabelMap, WeakLabels
from segmentation.data import GenConfig, derive_annotations, generate
from utils.dataset_io import (GROUNDTRUTH_NAME, format_boxes, format_weak,
                              parse_boxes, parse_weak, read_dataset, read_label_map,
                              read_num_labels, write_dataset, write_label_map)

CFG = GenConfig(num_images=4, height=16, width=20, num_fg_classes=3, min_size=4, max_size=10, seed=2)


def _same_annotation(a, b):
    if a.kind == "strong":
        assert_array_equal(a.annotation.label_map.labels, b.annotation.label_map.labels)
    elif a.kind == "weak":
        assert_array_equal(a.annotation.weak.present, b.annotation.weak.present)
    else:
        assert a.annotation.boxes == b.annotation.boxes


class TestManifestFields:
    def test_weak_format(self):
        weak = WeakLabels.from_labels([3, 1], 5)
        assert format_weak(weak) == "0,1,3"
        assert parse_weak("0,1,3", 5).labels() == [0, 1, 3]

    def test_boxes_format(self):
        boxes = BoxAnnotation((Box(1, 0, 1, 2, 3), Box(2, 4, 4, 5, 5)))
        assert format_boxes(boxes) == "1:0:1:2:3;2:4:4:5:5"
        assert parse_boxes(format_boxes(boxes)) == boxes
        assert parse_boxes(format_boxes(BoxAnnotation())) == BoxAnnotation()

    @pytest.mark.parametrize("text", ["1:2:3", "a:0:0:1:1", "0:0:0:1:1", "1:3:0:1:1"])
    def test_bad_boxes(self, text):
        with pytest.raises(DataError):
            parse_boxes(text)

    def test_bad_weak(self):
        with pytest.raises(DataError):
            parse_weak("1,x", 3)
        with pytest.raises(DataError):
            parse_weak("7", 3)


class TestRoundTrip:
    @pytest.mark.parametrize("kind", ["strong", "weak", "boxes"])
    def test_write_then_read(self, tmp_path, kind):
        samples = derive_annotations(generate(CFG), kind, CFG.num_labels, strong_count=1)
        manifest = write_dataset(samples, str(tmp_path), CFG.num_labels)
        loaded = read_dataset(manifest)
        assert read_num_labels(manifest) == CFG.num_labels
        assert [s.id for s in loaded] == [s.id for s in samples]
        for original, back in zip(samples, loaded):
            assert back.kind == original.kind
            assert_array_equal(back.image, original.image)
            _same_annotation(original, back)

    def test_groundtruth_written_for_weak_samples(self, tmp_path):
        samples = derive_annotations(generate(CFG), "weak", CFG.num_labels)
        write_dataset(samples, str(tmp_path), CFG.num_labels)
        truth = read_dataset(os.path.join(str(tmp_path), GROUNDTRUTH_NAME))
        for original, back in zip(generate(CFG), truth):
            assert_array_equal(back.annotation.label_map.labels, original.annotation.label_map.labels)

    def test_label_map_file(self, tmp_path):
        path = str(tmp_path / "map.pgm")
        labels = np.arange(12).reshape(3, 4)
        write_label_map(path, LabelMap(labels))
        with open(path, "rb") as f:
            assert f.read(2) == b"P5"
        assert_array_equal(read_label_map(path).labels, labels)

    def test_label_too_large_for_pgm(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_label_map(str(tmp_path / "x.pgm"), LabelMap(np.full((2, 2), 300)))


class TestMalformed:
    def _manifest(self, tmp_path, body):
        path = tmp_path / "manifest.txt"
        path.write_text("# num_labels=3\n" + body, encoding="utf-8")
        return str(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            read_dataset(str(tmp_path / "nothing.txt"))

    def test_wrong_field_count(self, tmp_path):
        with pytest.raises(DataError):
            read_dataset(self._manifest(tmp_path, "a images/a.ppm weak\n"))

    def test_missing_image(self, tmp_path):
        with pytest.raises(DataError):
            read_dataset(self._manifest(tmp_path, "a images/a.ppm weak 0,1\n"))

    def test_missing_header(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("", encoding="utf-8")
        with pytest.raises(DataError):
            read_dataset(str(path))
