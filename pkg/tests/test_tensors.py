"""Forward-kernel checks against naive loop references and hand values."""

import json
from pathlib import Path

import numpy as np
import pytest

import spikecast as sc
from spikecast.errors import DataError

from conftest import FIXTURES, make_dense_model
from oracles import naive_avgpool, naive_conv2d, naive_dense


class TestConv2d:
    def test_zero_input_zero_bias(self):
        out = sc.conv2d_forward(np.zeros((1, 1, 1), np.float32),
                                np.ones((1, 1, 1, 1), np.float32),
                                np.zeros(1, np.float32))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 0

    def test_ones_kernel_sums_window_plus_bias(self):
        x = np.ones((1, 3, 3), np.float32)
        w = np.ones((1, 1, 3, 3), np.float32)
        out = sc.conv2d_forward(x, w, np.array([1.0], np.float32))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(10.0)

    def test_matches_naive_loops_random(self):
        rng = np.random.default_rng(11)
        for _ in range(6):
            c, o = rng.integers(1, 5), rng.integers(1, 5)
            h = w = int(rng.integers(4, 9))
            kh = kw = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 2]))
            padding = int(rng.choice([0, 1]))
            x = rng.uniform(-0.5, 0.5, (c, h, w)).astype(np.float32)
            wt = rng.uniform(-0.5, 0.5, (o, c, kh, kw)).astype(np.float32)
            b = rng.uniform(-0.5, 0.5, o).astype(np.float32)
            got = sc.conv2d_forward(x, wt, b, stride, padding)
            want = naive_conv2d(x, wt, b, stride, padding)
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DataError, match="channels"):
            sc.conv2d_forward(np.zeros((2, 4, 4), np.float32),
                              np.zeros((1, 3, 3, 3), np.float32),
                              np.zeros(1, np.float32))


class TestDense:
    def test_identity(self):
        out = sc.dense_forward(np.array([3.0, 5.0], np.float32),
                               np.eye(2, dtype=np.float32), np.zeros(2, np.float32))
        np.testing.assert_array_equal(out, [3.0, 5.0])

    def test_sum_with_negative_bias(self):
        out = sc.dense_forward(np.array([0.5, 0.5], np.float32),
                               np.array([[1.0, 1.0]], np.float32),
                               np.array([-1.0], np.float32))
        assert out[0] == pytest.approx(0.0)

    def test_matches_naive_loops_random(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(-0.5, 0.5, 32).astype(np.float32)
        w = rng.uniform(-0.5, 0.5, (16, 32)).astype(np.float32)
        b = rng.uniform(-0.5, 0.5, 16).astype(np.float32)
        np.testing.assert_allclose(sc.dense_forward(x, w, b), naive_dense(x, w, b), atol=1e-6)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DataError):
            sc.dense_forward(np.zeros(3, np.float32), np.zeros((2, 4), np.float32),
                             np.zeros(2, np.float32))


class TestAvgPool:
    def test_uniform_window(self):
        x = np.ones((1, 2, 2), np.float32)
        assert sc.avgpool_forward(x, 2, 2)[0, 0, 0] == pytest.approx(1.0)

    def test_mean_of_window(self):
        x = np.array([[[0.0, 2.0], [4.0, 6.0]]], np.float32)
        assert sc.avgpool_forward(x, 2, 2)[0, 0, 0] == pytest.approx(3.0)

    def test_matches_naive_exactly(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(-1, 1, (3, 4, 4)).astype(np.float32)
        got = sc.avgpool_forward(x, 2, 2)
        np.testing.assert_array_equal(got, naive_avgpool(x, 2, 2).astype(np.float32))

    def test_nonconforming_geometry_rejected(self):
        with pytest.raises(sc.ShapeChainError):
            sc.avgpool_forward(np.zeros((1, 5, 5), np.float32), 2, 2)


class TestBatchNorm:
    def test_identity_configuration(self):
        eps = 0.001
        x = np.array([[0.3, -0.7]], np.float32)
        out = sc.batchnorm_forward(x, [1.0], [0.0], [0.0], [1.0 - eps], eps)
        np.testing.assert_allclose(out, x, atol=1e-7)

    def test_hand_computed(self):
        out = sc.batchnorm_forward(np.array([3.0], np.float32),
                                   [2.0], [1.0], [3.0], [1.0], 0.0)
        assert out[0] == pytest.approx(1.0)

    def test_negative_variance_rejected(self):
        with pytest.raises(DataError, match="variance"):
            sc.batchnorm_forward(np.zeros(1, np.float32), [1.0], [0.0], [0.0], [-1.0], 0.001)


class TestCnnForward:
    def test_relu_clamps_single_layer(self):
        model = make_dense_model([[-1.0]], [0.0])
        logits, acts = sc.cnn_forward(model, np.array([1.0], np.float32))
        assert logits[0] == 0.0
        assert acts[0][0] == 0.0

    def test_all_zero_input_bias_free(self):
        rng = np.random.default_rng(3)
        model = make_dense_model(rng.standard_normal((4, 4)), np.zeros(4))
        logits, acts = sc.cnn_forward(model, np.zeros(4, np.float32))
        assert np.all(logits == 0)
        assert all(np.all(a == 0) for a in acts)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        from conftest import make_random_cnn
        model = make_random_cnn(rng)
        x = rng.uniform(0, 1, model.input_shape).astype(np.float32)
        a, _ = sc.cnn_forward(model, x)
        b, _ = sc.cnn_forward(model, x)
        np.testing.assert_array_equal(a, b)

    def test_relu_outputs_nonnegative(self):
        rng = np.random.default_rng(5)
        from conftest import make_random_cnn
        model = make_random_cnn(rng)
        for _ in range(5):
            x = rng.uniform(0, 1, model.input_shape).astype(np.float32)
            _, acts = sc.cnn_forward(model, x)
            for a in acts:
                assert a.min() >= 0

    def test_shape_mismatch_names_model_input(self):
        model = make_dense_model([[1.0]], [0.0])
        with pytest.raises(DataError, match="input shape"):
            sc.cnn_forward(model, np.zeros(3, np.float32))

    def test_fixture_matches_source_framework_logits(self, fixture_model):
        man = json.loads((FIXTURES / "golden" / "manifest.json").read_text())
        golden = np.frombuffer((FIXTURES / "golden" / "golden_logits").read_bytes(),
                               dtype="<f4").reshape(man["params"]["golden_logits"]["shape"])
        probes = np.frombuffer((FIXTURES / "golden" / "probe_inputs").read_bytes(),
                               dtype="<f4").reshape(man["params"]["probe_inputs"]["shape"])
        for i in range(probes.shape[0]):
            logits, _ = sc.cnn_forward(fixture_model, probes[i])
            np.testing.assert_allclose(logits, golden[i], rtol=1e-5, atol=1e-5)
