#!/usr/bin/env python3
"""Train the small digits CNN and freeze it as the committed test fixture.

One-shot provenance script: trains a conv net (BN + bias throughout) on
the scikit-learn 8x8 digits task, then exports the model container, the
calibration and test bundles, source-framework golden logits for 16
probe images, and blob checksums. Everything lands in the primary
package's tests/fixtures directory and is committed; neither the primary
test suite nor its users ever need TensorFlow.

Usage: python make_fixtures.py [--epochs N] [--out DIR]
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")
os.environ.setdefault("TF_ENABLE_ONEDNN_OPTS", "0")

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from cnn_exporter import export_dataset, export_golden_logits, export_model, load_digits_splits

FIXTURES = Path(__file__).resolve().parents[2] / "tests" / "fixtures"
SEED = 7
# conv channels per 8x8/8x8/8x8 then 4x4/4x4 stage, hidden dense units.
# VGG-style depth at desk scale: deep enough that short spike trains and
# low-bit weights visibly cost accuracy, small enough to train in minutes.
WIDTHS = (8, 8, 12, 12, 16, 32)


def build_model(keras, widths=WIDTHS):
    c1, c2, c3, c4, c5, d1 = widths
    inputs = keras.Input(shape=(8, 8, 1))
    x = inputs
    for i, c in enumerate((c1, c2, c3), start=1):
        x = keras.layers.Conv2D(c, 3, padding="same", use_bias=True, name=f"conv{i}")(x)
        x = keras.layers.BatchNormalization(name=f"bn{i}")(x)
        x = keras.layers.ReLU(name=f"relu{i}")(x)
    x = keras.layers.AveragePooling2D(2, name="pool1")(x)
    for i, c in enumerate((c4, c5), start=4):
        x = keras.layers.Conv2D(c, 3, padding="same", use_bias=True, name=f"conv{i}")(x)
        x = keras.layers.BatchNormalization(name=f"bn{i}")(x)
        x = keras.layers.ReLU(name=f"relu{i}")(x)
    x = keras.layers.AveragePooling2D(2, name="pool2")(x)
    x = keras.layers.Flatten(name="flatten")(x)
    x = keras.layers.Dense(d1, name="fc1")(x)
    x = keras.layers.ReLU(name="relu6")(x)
    outputs = keras.layers.Dense(10, name="fc2")(x)
    return keras.Model(inputs, outputs, name="digits_cnn")


def shift_augment(images_nchw: np.ndarray, labels: np.ndarray):
    """All 3x3 single-pixel shifts (zero fill); 9x the data, deterministic."""
    outs, labs = [], []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            shifted = np.zeros_like(images_nchw)
            ys = slice(max(dy, 0), images_nchw.shape[2] + min(dy, 0))
            yd = slice(max(-dy, 0), images_nchw.shape[2] + min(-dy, 0))
            xs = slice(max(dx, 0), images_nchw.shape[3] + min(dx, 0))
            xd = slice(max(-dx, 0), images_nchw.shape[3] + min(-dx, 0))
            shifted[:, :, yd, xd] = images_nchw[:, :, ys, xs]
            outs.append(shifted)
            labs.append(labels)
    return np.concatenate(outs), np.concatenate(labs)


def train_model(epochs: int = 90, seed: int = SEED, widths=WIDTHS):
    """Train the fixture CNN; returns (model, splits, test accuracy)."""
    import tensorflow as tf
    from tensorflow import keras

    keras.utils.set_random_seed(seed)
    tf.config.experimental.enable_op_determinism()

    splits = load_digits_splits(seed=SEED)  # data split fixed even when scanning train seeds
    (train_x, train_y), _, (test_x, test_y) = splits
    aug_x, aug_y = shift_augment(train_x, train_y)

    model = build_model(keras, widths)
    model.compile(
        optimizer=keras.optimizers.Adam(1e-3),
        loss=keras.losses.SparseCategoricalCrossentropy(from_logits=True),
        metrics=["accuracy"],
    )
    model.fit(np.transpose(aug_x, (0, 2, 3, 1)), aug_y.astype(np.int64), batch_size=128,
              epochs=epochs, verbose=0, shuffle=True)
    _, test_acc = model.evaluate(np.transpose(test_x, (0, 2, 3, 1)),
                                 test_y.astype(np.int64), verbose=0)
    return model, splits, float(test_acc)


def export_all(model, splits, out: Path, provenance: dict) -> None:
    (_, _), (calib_x, calib_y), (test_x, test_y) = splits
    export_model(model, out / "digits_cnn", name="digits_cnn",
                 extra_metadata={"task": "sklearn-digits", **provenance})
    export_dataset(calib_x, calib_y, "calibration", out / "digits_calib")
    export_dataset(test_x, test_y, "test", out / "digits_test")
    export_golden_logits(model, np.transpose(test_x[:16], (0, 2, 3, 1)), out / "golden",
                         probe_indices=range(16))
    model.save(out / "source" / "digits_cnn.keras")

    checksums = {}
    for blob in sorted((out / "digits_cnn").iterdir()):
        if blob.name == "manifest.json":
            continue
        checksums[blob.name] = hashlib.sha256(blob.read_bytes()).hexdigest()
    (out / "golden" / "cnn_checksums.json").write_text(
        json.dumps(checksums, indent=2, sort_keys=True) + "\n")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--epochs", type=int, default=90)
    parser.add_argument("--seed", type=int, default=SEED)
    parser.add_argument("--widths", type=lambda s: tuple(int(v) for v in s.split(",")),
                        default=WIDTHS)
    parser.add_argument("--out", type=Path, default=FIXTURES)
    args = parser.parse_args()

    model, splits, test_acc = train_model(args.epochs, args.seed, args.widths)
    print(f"test accuracy on 512 held-out images: {test_acc:.4f}")
    (args.out / "source").mkdir(parents=True, exist_ok=True)
    export_all(model, splits, args.out,
               {"train_seed": args.seed, "epochs": args.epochs, "widths": list(args.widths)})
    print(f"fixtures written to {args.out}")


if __name__ == "__main__":
    main()
