"""Model validation, shape chaining, stage analysis, dataset invariants."""

import numpy as np
import pytest

import spikecast as sc
from spikecast.errors import DataError, ShapeChainError
from spikecast.layers import LayerSpec
from spikecast.models import CnnModel, DatasetBundle, forward_batch, iter_stages

from conftest import make_random_cnn


class TestValidation:
    def test_random_valid_models_accepted(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            make_random_cnn(rng)  # constructor validates

    def test_shape_chain_violation_rejected(self):
        rng = np.random.default_rng(22)
        model = make_random_cnn(rng)
        params = dict(model.params)
        params["fc.w"] = params["fc.w"][:, :-1]  # break the flattened width
        with pytest.raises(ShapeChainError, match="fc"):
            CnnModel(model.name, model.input_shape, model.layers, params)

    def test_missing_param_ref_rejected(self):
        layers = [LayerSpec("input", "input"),
                  LayerSpec("fc", "dense", {}, {"weights": "nope", "bias": "fc.b"})]
        with pytest.raises(DataError, match="nope"):
            CnnModel("m", (2,), layers, {"fc.b": np.zeros(2, np.float32)})

    def test_input_must_come_first_and_once(self):
        with pytest.raises(DataError, match="input"):
            CnnModel("m", (2,), [LayerSpec("fc", "dense", {},
                                           {"weights": "w", "bias": "b"})],
                     {"w": np.eye(2, dtype=np.float32), "b": np.zeros(2, np.float32)})
        with pytest.raises(DataError, match="duplicate"):
            CnnModel("m", (2,), [LayerSpec("input", "input"), LayerSpec("in2", "input")], {})

    def test_pool_window_must_tile(self):
        layers = [LayerSpec("input", "input"),
                  LayerSpec("p", "avgpool", {"window": 2, "stride": 2})]
        with pytest.raises(ShapeChainError, match="evenly"):
            CnnModel("m", (1, 5, 5), layers, {})


class TestStages:
    def test_fixture_stage_layout(self, fixture_model):
        stages = iter_stages(fixture_model)
        kinds = [s.kind for s in stages]
        assert kinds == ["conv2d", "conv2d", "conv2d", "avgpool", "conv2d", "conv2d",
                         "avgpool", "dense", "dense"]
        assert stages[-1].flatten_before is False
        assert stages[7].flatten_before is True
        assert all(s.has_relu for s in stages if s.kind != "avgpool" and s is not stages[-1])
        assert stages[-1].has_relu is False

    def test_bn_must_follow_parametric_layer(self):
        layers = [LayerSpec("input", "input"),
                  LayerSpec("bn", "batchnorm", {"epsilon": 0.001},
                            {"gamma": "g", "beta": "b", "mean": "m", "variance": "v"})]
        params = {k: np.ones(1, np.float32) for k in "gbmv"}
        model = CnnModel("m", (1, 2, 2), layers, params)
        with pytest.raises(DataError, match="batchnorm"):
            iter_stages(model)

    def test_hidden_layer_without_relu_rejected(self):
        layers = [LayerSpec("input", "input"),
                  LayerSpec("fc1", "dense", {}, {"weights": "w1", "bias": "b1"}),
                  LayerSpec("fc2", "dense", {}, {"weights": "w2", "bias": "b2"})]
        params = {"w1": np.eye(3, dtype=np.float32), "b1": np.zeros(3, np.float32),
                  "w2": np.eye(3, dtype=np.float32), "b2": np.zeros(3, np.float32)}
        model = CnnModel("m", (3,), layers, params)
        with pytest.raises(DataError, match="ReLU"):
            iter_stages(model)


class TestForwardBatch:
    def test_agrees_with_single_image_forward(self):
        rng = np.random.default_rng(23)
        model = make_random_cnn(rng)
        X = rng.uniform(0, 1, (4,) + model.input_shape).astype(np.float32)
        logits_b, acts_b = forward_batch(model, X)
        for i in range(4):
            logits, acts = sc.cnn_forward(model, X[i])
            np.testing.assert_allclose(logits_b[i], logits, rtol=1e-6, atol=1e-6)
            # batched path emits one map per stage; single-image path emits
            # relu/pool maps, identical except the final raw-logit stage
            for a_b, a in zip(acts_b[:-1], acts):
                np.testing.assert_allclose(a_b[i], a, rtol=1e-6, atol=1e-6)


class TestDatasetBundle:
    def test_single_zero_image(self):
        bundle = DatasetBundle(np.zeros((1, 1, 2, 2), np.float32),
                               np.zeros(1, np.uint32), "calibration")
        assert len(bundle) == 1

    def test_out_of_range_value_cites_index(self):
        inputs = np.zeros((1, 4), np.float32)
        inputs[0, 3] = 1.5
        with pytest.raises(DataError, match="index 3"):
            DatasetBundle(inputs, np.zeros(1, np.uint32))

    def test_batch_size_mismatch(self):
        with pytest.raises(DataError, match="labels"):
            DatasetBundle(np.zeros((2, 4), np.float32), np.zeros(3, np.uint32))

    def test_fixture_test_bundle_has_512_labels(self, test_bundle):
        assert len(test_bundle) == 512
        assert test_bundle.split_tag == "test"
        assert test_bundle.inputs.max() <= 1.0
