"""Shared fixtures: the committed digits containers, random model builders,
and a session-wide cache of converted models and evaluation runs so the
acceptance criteria and module tests never repeat a simulation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import spikecast as sc
from spikecast.layers import LayerSpec
from spikecast.models import CnnModel, DatasetBundle

FIXTURES = Path(__file__).parent / "fixtures"


# ------------------------------------------------------------ model builders

def make_dense_model(weights, bias, relu=True, name="net"):
    """Single dense layer (optionally rectified) as a CnnModel."""
    weights = np.asarray(weights, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    layers = [LayerSpec("input", "input"),
              LayerSpec("fc", "dense", {}, {"weights": "fc.w", "bias": "fc.b"})]
    if relu:
        layers.append(LayerSpec("fc_relu", "relu"))
    return CnnModel(name, (weights.shape[1],), layers,
                    {"fc.w": weights, "fc.b": bias})


def make_random_cnn(rng, in_shape=(2, 6, 6), channels=(3, 4), dense=5,
                    with_bn=True, epsilon=0.001, scale=0.5):
    """Random small conv net: conv(+BN)+ReLU stack, pool, flatten, dense."""
    c_in, h, w = in_shape
    layers = [LayerSpec("input", "input")]
    params = {}
    for i, c_out in enumerate(channels):
        params[f"c{i}.w"] = (rng.standard_normal((c_out, c_in, 3, 3)) * scale).astype(np.float32)
        params[f"c{i}.b"] = (rng.standard_normal(c_out) * 0.2).astype(np.float32)
        layers.append(LayerSpec(f"c{i}", "conv2d", {"stride": 1, "padding": 1},
                                {"weights": f"c{i}.w", "bias": f"c{i}.b"}))
        if with_bn:
            params[f"bn{i}.g"] = rng.uniform(0.5, 2.0, c_out).astype(np.float32)
            params[f"bn{i}.be"] = (rng.standard_normal(c_out) * 0.3).astype(np.float32)
            params[f"bn{i}.m"] = (rng.standard_normal(c_out) * 0.3).astype(np.float32)
            params[f"bn{i}.v"] = rng.uniform(0.2, 2.0, c_out).astype(np.float32)
            layers.append(LayerSpec(f"bn{i}", "batchnorm", {"epsilon": epsilon},
                                    {"gamma": f"bn{i}.g", "beta": f"bn{i}.be",
                                     "mean": f"bn{i}.m", "variance": f"bn{i}.v"}))
        layers.append(LayerSpec(f"r{i}", "relu"))
        c_in = c_out
    layers.append(LayerSpec("pool", "avgpool", {"window": 2, "stride": 2}))
    h, w = h // 2, w // 2
    layers.append(LayerSpec("flat", "flatten"))
    params["fc.w"] = (rng.standard_normal((dense, c_in * h * w)) * scale).astype(np.float32)
    params["fc.b"] = (rng.standard_normal(dense) * 0.2).astype(np.float32)
    layers.append(LayerSpec("fc", "dense", {}, {"weights": "fc.w", "bias": "fc.b"}))
    return CnnModel("random", in_shape, layers, params)


def make_random_snn(rng, widths=(6, 5, 4), threshold=None, integer=False, bits=8):
    """Random dense-chain SnnModel for conservation and engine tests."""
    from spikecast.convert import SnnLayer, SnnModel
    layers = []
    prev = widths[0]
    for i, n in enumerate(widths[1:], start=1):
        thr = threshold if threshold is not None else float(rng.uniform(0.5, 100.0))
        w = rng.standard_normal((n, prev)) * rng.uniform(0.2, 2.0)
        b = rng.standard_normal(n) * 0.5
        if integer:
            s = np.max(np.abs(w))
            w = np.round(w / s * 2 ** bits)
            b = np.round(b / s * 2 ** bits)
            thr = float(max(1, round(thr / s * 2 ** bits)))
        layers.append(SnnLayer(name=f"l{i}", kind="dense", threshold=thr,
                               weights=w, bias_current=b, out_shape=(n,)))
        prev = n
    return SnnModel(name="rand", input_shape=(widths[0],), layers=tuple(layers),
                    kappa0=100.0, timesteps=32,
                    numeric_mode="fixed_point" if integer else "float",
                    quant_bits=bits if integer else None)


# ------------------------------------------------------- committed fixtures

def _need_fixtures():
    if not (FIXTURES / "digits_cnn" / "manifest.json").exists():
        pytest.skip("committed digits fixtures missing (run exporter/scripts/make_fixtures.py)")


@pytest.fixture(scope="session")
def fixture_model():
    _need_fixtures()
    return sc.load_model(FIXTURES / "digits_cnn")


@pytest.fixture(scope="session")
def test_bundle():
    _need_fixtures()
    return sc.load_dataset(FIXTURES / "digits_test")


@pytest.fixture(scope="session")
def calib_bundle():
    _need_fixtures()
    return sc.load_dataset(FIXTURES / "digits_calib")


@pytest.fixture(scope="session")
def folded_model(fixture_model):
    return sc.fold_batchnorm(fixture_model)


@pytest.fixture(scope="session")
def calib_stats(folded_model, calib_bundle):
    return sc.calibrate(folded_model, calib_bundle)


@pytest.fixture(scope="session")
def cnn_acc(folded_model, test_bundle):
    return sc.cnn_accuracy(folded_model, test_bundle)


class FixtureRuns:
    """Build-and-evaluate cache over the committed fixture."""

    def __init__(self, model, calib, test):
        self.model = model
        self.calib = calib
        self.test = test
        self._folded = {}
        self._stats = {}
        self._snn = {}
        self._eval = {}

    def folded(self, eps_override=None):
        key = eps_override
        if key not in self._folded:
            self._folded[key] = sc.fold_batchnorm(self.model, eps_override)
        return self._folded[key]

    def stats(self, eps_override=None):
        key = eps_override
        if key not in self._stats:
            self._stats[key] = sc.calibrate(self.folded(eps_override), self.calib)
        return self._stats[key]

    def snn(self, mode="ecc", T=256, eta=0.5, bits=None, eps_override=None):
        key = (mode, T, eta, bits, eps_override)
        if key not in self._snn:
            cfg = sc.ConversionConfig(mode=mode, timesteps=T, eta=eta, quant_bits=bits)
            snn = sc.convert(self.folded(eps_override), self.stats(eps_override), cfg)
            if mode == "ecc" and eta > 0:
                snn = sc.apply_tre(snn, eta, T)
            if bits is not None:
                snn = sc.quantize(snn, bits)
            self._snn[key] = snn
        return self._snn[key]

    def evaluation(self, mode="ecc", T=256, eta=0.5, bits=None, eps_override=None):
        key = (mode, T, eta, bits, eps_override)
        if key not in self._eval:
            snn = self.snn(mode, T, eta, bits, eps_override)
            self._eval[key] = sc.evaluate(snn, self.test, T)
        return self._eval[key]

    def accuracy(self, **kw):
        return self.evaluation(**kw)["accuracy"]


@pytest.fixture(scope="session")
def runs(fixture_model, calib_bundle, test_bundle):
    return FixtureRuns(fixture_model, calib_bundle, test_bundle)
