"""
On-disk dataset format: PPM images, PGM label maps and a one-line-per-sample manifest

    <id> <image.ppm> strong <labels.pgm>
    <id> <image.ppm> weak <l1,l2,...>
    <id> <image.ppm> boxes <class:x0:y0:x1:y1;...>

Paths are relative to the manifest. A '# num_labels=N' header fixes the label space.
"""

import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from models import (Box, BoxAnnotation, Boxes, DataError, ImageLevel,
                    InvalidInputError, LabelMap, Sample, Strong, WeakLabels)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
GROUNDTRUTH_NAME = "groundtruth.txt"
NO_BOXES = "-"


# ==================== IMAGES ====================

def write_image(path: str, image: np.ndarray):
    """Binary PPM (P6), 8 bits per channel"""
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            pixels = np.array(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot read image {path}: {e}")
    return pixels.astype(np.float64) / 255.0


def write_label_map(path: str, label_map: LabelMap):
    """Binary PGM (P5); gray value = label index"""
    labels = label_map.labels
    if labels.size and labels.max() > 255:
        raise InvalidInputError(f"Label {int(labels.max())} does not fit an 8-bit PGM")
    Image.fromarray(labels.astype(np.uint8)).save(path, format="PPM")


def read_label_map(path: str) -> LabelMap:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataError(f"{path} is not an 8-bit grayscale map")
            labels = np.array(img, dtype=np.int64)
    except OSError as e:
        raise DataError(f"Cannot read label map {path}: {e}")
    return LabelMap(labels)


# ==================== MANIFEST ====================

def format_weak(weak: WeakLabels) -> str:
    return ",".join(str(l) for l in weak.labels())


def parse_weak(text: str, num_labels: int) -> WeakLabels:
    try:
        labels = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise DataError(f"Bad weak label list '{text}'")
    try:
        return WeakLabels.from_labels(labels, num_labels)
    except InvalidInputError as e:
        raise DataError(str(e))


def format_boxes(boxes: BoxAnnotation) -> str:
    if not len(boxes):
        return NO_BOXES
    return ";".join(f"{b.cls}:{b.x0}:{b.y0}:{b.x1}:{b.y1}" for b in boxes)


def parse_boxes(text: str) -> BoxAnnotation:
    if text == NO_BOXES:
        return BoxAnnotation(())
    boxes = []
    for item in text.split(";"):
        parts = item.split(":")
        if len(parts) != 5:
            raise DataError(f"Bad box '{item}', expected class:x0:y0:x1:y1")
        try:
            boxes.append(Box(*(int(p) for p in parts)))
        except ValueError as e:
            raise DataError(f"Bad box '{item}': {e}")
    return BoxAnnotation(tuple(boxes))


def write_dataset(samples: Sequence[Sample], root: str, num_labels: int,
                  manifest_name: str = MANIFEST_NAME,
                  write_groundtruth: bool = True) -> str:
    """
    Write images, label maps and the manifest under root

    Args:
        samples: samples to write
        root: output directory (created if missing)
        num_labels: L+1, recorded in the manifest header
        manifest_name: manifest file name inside root
        write_groundtruth: also write a strong manifest for every sample that
            still carries its generator instances or a strong map

    Returns:
        Path of the manifest
    """
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    lines = [f"# num_labels={num_labels}"]
    truth_lines = [f"# num_labels={num_labels}"]
    for sample in samples:
        if any(ch.isspace() for ch in sample.id) or not sample.id:
            raise DataError(f"Sample id '{sample.id}' must be non-empty without whitespace")
        image_rel = f"images/{sample.id}.ppm"
        label_rel = f"labels/{sample.id}.pgm"
        write_image(os.path.join(root, image_rel), sample.image)

        truth = groundtruth_of(sample)
        if truth is not None:
            write_label_map(os.path.join(root, label_rel), truth)
            truth_lines.append(f"{sample.id} {image_rel} strong {label_rel}")

        annotation = sample.annotation
        if isinstance(annotation, Strong):
            lines.append(f"{sample.id} {image_rel} strong {label_rel}")
        elif isinstance(annotation, ImageLevel):
            lines.append(f"{sample.id} {image_rel} weak {format_weak(annotation.weak)}")
        else:
            lines.append(f"{sample.id} {image_rel} boxes {format_boxes(annotation.boxes)}")

    manifest = os.path.join(root, manifest_name)
    with open(manifest, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    if write_groundtruth and len(truth_lines) > 1:
        with open(os.path.join(root, GROUNDTRUTH_NAME), "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(truth_lines) + "\n")
    logger.info("wrote %d samples to %s", len(samples), manifest)
    return manifest


def groundtruth_of(sample: Sample) -> Optional[LabelMap]:
    """Strong map of a sample, rebuilt from its instances for weak samples"""
    if isinstance(sample.annotation, Strong):
        return sample.annotation.label_map
    if not sample.instances:
        return None
    labels = np.zeros((sample.height, sample.width), dtype=np.int64)
    for instance in sample.instances:
        labels[instance.mask] = instance.cls
    return LabelMap(labels)


def read_num_labels(manifest: str) -> Optional[int]:
    if not os.path.exists(manifest):
        raise DataError(f"Manifest not found: {manifest}")
    with open(manifest, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line.startswith("#") and "num_labels=" in line:
                try:
                    return int(line.split("num_labels=", 1)[1])
                except ValueError:
                    raise DataError(f"Bad num_labels header in {manifest}")
    return None


def read_dataset(manifest: str, num_labels: Optional[int] = None) -> List[Sample]:
    """Parse a manifest and load every sample it lists"""
    if not os.path.exists(manifest):
        raise DataError(f"Manifest not found: {manifest}")
    header = read_num_labels(manifest)
    num_labels = num_labels or header
    if num_labels is None:
        raise DataError(f"{manifest} has no num_labels header")
    root = os.path.dirname(os.path.abspath(manifest))
    samples = []
    seen: Dict[str, int] = {}
    with open(manifest, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{manifest}:{number}: expected '<id> <image> <type> <annotation>'")
            sample_id, image_rel, kind, payload = parts
            if sample_id in seen:
                raise DataError(f"{manifest}:{number}: duplicate id '{sample_id}'")
            seen[sample_id] = number
            image = read_image(os.path.join(root, image_rel))
            if kind == "strong":
                label_map = read_label_map(os.path.join(root, payload))
                annotation = Strong(label_map)
            elif kind == "weak":
                annotation = ImageLevel(parse_weak(payload, num_labels))
            elif kind == "boxes":
                annotation = Boxes(parse_boxes(payload))
            else:
                raise DataError(f"{manifest}:{number}: unknown annotation type '{kind}'")
            try:
                samples.append(Sample(image, annotation, sample_id))
            except InvalidInputError as e:
                raise DataError(f"{manifest}:{number}: {e}")
    logger.info("read %d samples from %s", len(samples), manifest)
    return samples
