import os
import sys
from pathlib import Path

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")
os.environ.setdefault("TF_ENABLE_ONEDNN_OPTS", "0")

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np
import pytest

FIXTURES = Path(__file__).resolve().parents[2] / "tests" / "fixtures"


@pytest.fixture(scope="session")
def keras():
    tf = pytest.importorskip("tensorflow")
    tf.keras.utils.set_random_seed(0)
    return tf.keras


@pytest.fixture(scope="session")
def source_model(keras):
    path = FIXTURES / "source" / "digits_cnn.keras"
    if not path.exists():
        pytest.skip("trained source model missing (run scripts/make_fixtures.py)")
    return keras.models.load_model(path)


@pytest.fixture()
def digit_images():
    sklearn = pytest.importorskip("sklearn.datasets")
    digits = sklearn.load_digits()
    return (digits.images / 16.0).astype(np.float32)[:, None, :, :], \
        digits.target.astype(np.uint32)
