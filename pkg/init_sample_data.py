"""
Sample data initialization script
Run this to write a ready-to-train synthetic benchmark: one training split per
annotation variant plus a strongly annotated test split
"""

import argparse
import os
from dataclasses import replace

from segmentation.data import GenConfig, derive_annotations, generate
from utils.dataset_io import write_dataset

TRAIN_IMAGES = 200
TEST_IMAGES = 50
STRONG_SUBSET = 20


def initialize_sample_data(root: str = "benchmark", seed: int = 0,
                           train_images: int = TRAIN_IMAGES, test_images: int = TEST_IMAGES,
                           strong_subset: int = STRONG_SUBSET) -> dict:
    """
    Write the benchmark splits under root

    Returns:
        split name -> manifest path
    """
    print("Initializing sample data...")
    base = GenConfig(num_images=train_images, seed=seed)
    num_labels = base.num_labels

    train = generate(base, "train")
    # Test scenes use a disjoint stream so no image repeats across splits
    test = generate(replace(base, num_images=test_images, seed=seed + 1), "test")

    splits = {
        "train_strong": derive_annotations(train, "strong", num_labels),
        "train_weak": derive_annotations(train, "weak", num_labels),
        "train_boxes": derive_annotations(train, "boxes", num_labels),
        "train_semi": derive_annotations(train, "weak", num_labels, strong_subset),
        "train_strong_subset": train[:strong_subset],
        "test": test,
    }
    manifests = {}
    for name, samples in splits.items():
        manifests[name] = write_dataset(samples, os.path.join(root, name), num_labels)
        print(f"  - {name}: {len(samples)} samples")

    print(f"\nSample data written to {root}")
    return manifests


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Write the synthetic benchmark splits")
    parser.add_argument("--root", default="benchmark")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    initialize_sample_data(args.root, args.seed)
