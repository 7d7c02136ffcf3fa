"""Export image datasets into container bundles (values scaled to [0, 1])."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .writer import write_blobs, write_manifest


class DatasetExportError(ValueError):
    pass


def export_dataset(images_nchw: np.ndarray, labels: np.ndarray, split_tag: str, out_dir) -> Path:
    """Write a dataset bundle; inputs must already be scaled into [0, 1]."""
    images = np.asarray(images_nchw, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint32)
    if images.shape[0] == 0:
        raise DatasetExportError("empty split")
    if images.shape[0] != labels.shape[0]:
        raise DatasetExportError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if images.min() < 0 or images.max() > 1:
        raise DatasetExportError(
            f"values outside [0, 1]: min {images.min()}, max {images.max()}")
    out_dir = Path(out_dir)
    entries = write_blobs(out_dir, {"inputs": images, "labels": labels})
    write_manifest(out_dir, {
        "kind": "dataset",
        "split_tag": split_tag,
        "inputs": entries["inputs"],
        "labels": entries["labels"],
    })
    return out_dir


def load_digits_splits(seed: int = 7, test_size: int = 512, calib_size: int = 512):
    """Deterministic splits of the scikit-learn 8x8 digits set.

    Returns (train, calib, test) triples of (images, labels) with images
    as (N, 1, 8, 8) float32 in [0, 1]. The calibration set is a subset of
    the training images; the test set is disjoint from training.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = (digits.images / 16.0).astype(np.float32)[:, None, :, :]
    labels = digits.target.astype(np.uint32)
    perm = np.random.default_rng(seed).permutation(len(labels))
    test_idx = perm[:test_size]
    train_idx = perm[test_size:]
    calib_idx = train_idx[:calib_size]
    return ((images[train_idx], labels[train_idx]),
            (images[calib_idx], labels[calib_idx]),
            (images[test_idx], labels[test_idx]))
