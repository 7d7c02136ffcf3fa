"""Model and dataset containers: types, validation, stage analysis.

A CnnModel is an ordered layer list plus a parameter table. Validation
chains shapes through every layer at construction, so a model that loads
is a model that runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensors
from .errors import DataError, ShapeChainError

_ALLOWED_DTYPES = {"float32": np.float32, "float64": np.float64,
                   "int64": np.int64, "uint32": np.uint32}


@dataclass(frozen=True)
class CnnModel:
    name: str
    input_shape: tuple
    layers: tuple
    params: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        validate_model(self)

    @property
    def output_shape(self) -> tuple:
        return layer_shapes(self)[-1]

    def has_batchnorm(self) -> bool:
        return any(l.kind == L.BATCHNORM for l in self.layers)

    def forward(self, x: np.ndarray):
        return tensors.cnn_forward(self, x)


def validate_model(model: CnnModel) -> None:
    """Check layer ordering, param resolution, and the full shape chain."""
    if not model.layers:
        raise DataError("model has no layers")
    if model.layers[0].kind != L.INPUT:
        raise DataError("first layer must be the input layer")
    for i, layer in enumerate(model.layers[1:], start=1):
        if layer.kind == L.INPUT:
            raise DataError(f"layer {i} '{layer.name}': duplicate input layer")
    names = [l.name for l in model.layers]
    if len(set(names)) != len(names):
        raise DataError("layer names must be unique")
    for layer in model.layers:
        for slot, ref in layer.param_refs.items():
            if ref not in model.params:
                raise DataError(
                    f"layer '{layer.name}': param_ref '{slot}' names missing tensor '{ref}'"
                )
    for name, tensor in model.params.items():
        arr = np.asarray(tensor)
        if arr.size == 0 or any(d < 1 for d in arr.shape):
            raise DataError(f"parameter '{name}': empty tensor")
    layer_shapes(model)  # raises ShapeChainError on any break


def layer_shapes(model: CnnModel) -> list[tuple]:
    """Per-layer output shapes, starting with the input layer's."""
    param_shapes = {k: tuple(np.asarray(v).shape) for k, v in model.params.items()}
    shapes = []
    cur = model.input_shape
    for layer in model.layers:
        cur = L.infer_output_shape(layer, cur, param_shapes)
        shapes.append(cur)
    return shapes


@dataclass(frozen=True)
class Stage:
    """One spiking-layer-equivalent chunk of a CNN.

    kind is 'conv2d', 'dense', or 'avgpool'. Parametric stages carry the
    indices of their conv/dense layer, optional trailing batchnorm, and
    whether a ReLU closes the stage. ``flatten_before`` marks a flatten
    between the previous stage and this one.
    """

    kind: str
    layer_index: int
    name: str
    bn_index: int | None = None
    has_relu: bool = False
    flatten_before: bool = False
    out_shape: tuple = ()


def iter_stages(model: CnnModel) -> list[Stage]:
    """Group layers into spiking stages, validating conversion topology.

    Rules: batchnorm must directly follow a conv or dense layer; every
    hidden conv/dense stage must be rectified (spike rates cannot encode
    negative values); the final stage may omit ReLU (classifier logits).
    """
    shapes = layer_shapes(model)
    stages: list[Stage] = []
    flatten_pending = False
    i = 0
    n = len(model.layers)
    while i < n:
        layer = model.layers[i]
        if layer.kind == L.INPUT:
            i += 1
            continue
        if layer.kind == L.FLATTEN:
            if flatten_pending:
                raise DataError(f"layer '{layer.name}': consecutive flatten layers")
            flatten_pending = True
            i += 1
            continue
        if layer.kind == L.BATCHNORM:
            raise DataError(
                f"layer '{layer.name}': batchnorm must directly follow a conv or dense layer"
            )
        if layer.kind == L.RELU:
            raise DataError(f"layer '{layer.name}': relu without a preceding parametric layer")
        if layer.kind == L.AVGPOOL:
            stages.append(Stage(L.AVGPOOL, i, layer.name, flatten_before=flatten_pending,
                                out_shape=shapes[i]))
            flatten_pending = False
            i += 1
            continue
        # conv2d or dense
        bn_index = None
        j = i + 1
        if j < n and model.layers[j].kind == L.BATCHNORM:
            bn_index = j
            j += 1
        has_relu = j < n and model.layers[j].kind == L.RELU
        out_idx = j if has_relu else (bn_index if bn_index is not None else i)
        stages.append(Stage(layer.kind, i, layer.name, bn_index=bn_index, has_relu=has_relu,
                            flatten_before=flatten_pending, out_shape=shapes[out_idx]))
        flatten_pending = False
        i = j + 1 if has_relu else j
    if not stages:
        raise DataError("model has no convertible layers")
    for k, stage in enumerate(stages):
        hidden = k < len(stages) - 1
        if hidden and stage.kind in (L.CONV2D, L.DENSE) and not stage.has_relu:
            raise DataError(
                f"layer '{stage.name}': hidden {stage.kind} stage lacks a ReLU"
            )
    if stages[-1].kind == L.AVGPOOL:
        raise DataError("final stage must be a conv or dense readout, not a pool")
    return stages


def forward_batch(model: CnnModel, X: np.ndarray):
    """Batched forward pass: (B, *input_shape) -> (logits, stage activations).

    Stage activations align with iter_stages ordering; for the final stage
    without ReLU the raw logits are the stage output. Used by calibration
    and accuracy sweeps where the per-image loop would dominate.
    """
    X = np.asarray(X, dtype=np.float64)
    if tuple(X.shape[1:]) != model.input_shape:
        raise DataError(f"batch shape {X.shape[1:]} != model input {model.input_shape}")
    stages = iter_stages(model)
    out = X
    acts = []
    for stage in stages:
        if stage.flatten_before:
            out = out.reshape(out.shape[0], -1)
        layer = model.layers[stage.layer_index]
        if stage.kind == L.CONV2D:
            out = tensors.conv2d_batch(
                out, model.params[layer.ref("weights")], model.params[layer.ref("bias")],
                int(layer.geom("stride")), int(layer.geom("padding")))
        elif stage.kind == L.DENSE:
            out = out @ np.asarray(model.params[layer.ref("weights")], dtype=np.float64).T \
                + np.asarray(model.params[layer.ref("bias")], dtype=np.float64)
        else:
            out = tensors.avgpool_batch(out, int(layer.geom("window")), int(layer.geom("stride")))
        if stage.bn_index is not None:
            bn = model.layers[stage.bn_index]
            g, b, m, v = (np.asarray(model.params[bn.ref(s)], dtype=np.float64)
                          for s in ("gamma", "beta", "mean", "variance"))
            scale = g / np.sqrt(v + float(bn.geom("epsilon")))
            shp = (1, -1) + (1,) * (out.ndim - 2)
            out = scale.reshape(shp) * (out - m.reshape(shp)) + b.reshape(shp)
        if stage.has_relu:
            out = np.maximum(out, 0)
        acts.append(out)
    return out, acts


@dataclass(frozen=True)
class DatasetBundle:
    """A batch of inputs in [0, 1] with integer labels and a split tag."""

    inputs: np.ndarray
    labels: np.ndarray
    split_tag: str = "test"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.uint32)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1 or inputs.shape[0] != labels.shape[0]:
            raise DataError(
                f"dataset: {inputs.shape[0]} inputs vs {labels.shape[0]} labels"
            )
        flat = inputs.reshape(-1)
        bad = np.where((flat < 0) | (flat > 1))[0]
        if bad.size:
            k = int(bad[0])
            raise DataError(f"dataset: value {flat[k]!r} at flat index {k} outside [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])
