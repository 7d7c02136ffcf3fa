"""Dense forward-pass kernels for the supported CNN layers.

Conventions: channels-first row-major, float32 storage, accumulation in
float64 inside every reduction. All kernels are pure functions; the same
im2col/pooling helpers back the spiking simulator.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .errors import DataError

F32 = np.float32
F64 = np.float64


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F64)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold (B, C, H, W) into (B, OH, OW, C*kh*kw) patch rows (zero padding)."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]          # (B, C, OH, OW, kh, kw)
    win = win.transpose(0, 2, 3, 1, 4, 5)              # (B, OH, OW, C, kh, kw)
    oh, ow = win.shape[1], win.shape[2]
    return win.reshape(b, oh, ow, c * kh * kw)


def conv2d_batch(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                 stride: int, padding: int) -> np.ndarray:
    """Cross-correlation on a (B, C, H, W) batch; returns (B, O, OH, OW) float64."""
    o, c, kh, kw = weights.shape
    cols = im2col(_as_f64(x), kh, kw, stride, padding)
    wmat = _as_f64(weights).reshape(o, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + _as_f64(bias)
    return out.transpose(0, 3, 1, 2)


def avgpool_batch(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Average pooling on a (B, C, H, W) batch, padding 0; returns float64."""
    x = _as_f64(x)
    b, c, h, w = x.shape
    if stride == window and h % window == 0 and w % window == 0:
        r = x.reshape(b, c, h // window, window, w // window, window)
        return r.mean(axis=(3, 5))
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    return win[:, :, ::stride, ::stride].mean(axis=(4, 5))


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """Single-image convolution: (C, H, W) x (O, C, Kh, Kw) + (O,) -> (O, OH, OW)."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 3 or weights.ndim != 4:
        raise DataError(f"conv2d: need CxHxW input and OxCxKhxKw weights, got {x.shape} and {weights.shape}")
    if x.shape[0] != weights.shape[1]:
        raise DataError(
            f"conv2d: input channels {x.shape[0]} do not match weight channels {weights.shape[1]}"
        )
    out = conv2d_batch(x[None], weights, np.asarray(bias), stride, padding)[0]
    return out.astype(F32)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map: out_i = sum_j W[i, j] * x[j] + b[i]."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise DataError(f"dense: weights {weights.shape} incompatible with input {x.shape}")
    out = _as_f64(weights) @ _as_f64(x) + _as_f64(bias)
    return out.astype(F32)


def avgpool_forward(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Average pooling on a single (C, H, W) image."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DataError(f"avgpool: need a CxHxW input, got {x.shape}")
    L.pool_output_hw(x.shape[1], x.shape[2], window, stride)
    return avgpool_batch(x[None], window, stride)[0].astype(F32)


def batchnorm_forward(x: np.ndarray, gamma, beta, mean, variance, epsilon: float) -> np.ndarray:
    """Inference-mode batch normalisation, channel-wise over axis 0."""
    x = np.asarray(x)
    gamma, beta, mean, variance = (np.asarray(a) for a in (gamma, beta, mean, variance))
    c = x.shape[0]
    for nm, a in (("gamma", gamma), ("beta", beta), ("mean", mean), ("variance", variance)):
        if a.shape != (c,):
            raise DataError(f"batchnorm: {nm} shape {a.shape} != ({c},)")
    if np.any(variance < 0):
        raise DataError("batchnorm: negative variance")
    shape = (c,) + (1,) * (x.ndim - 1)
    scale = _as_f64(gamma) / np.sqrt(_as_f64(variance) + F64(epsilon))
    out = scale.reshape(shape) * (_as_f64(x) - _as_f64(mean).reshape(shape)) + _as_f64(beta).reshape(shape)
    return out.astype(F32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def flatten(x: np.ndarray) -> np.ndarray:
    """Channels-first row-major flatten, matching the container contract."""
    return np.ascontiguousarray(x).reshape(-1)


def cnn_forward(model, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run a full forward pass; return (logits, activation maps).

    The activation list holds one map per rectified or pooled stage, in
    network order: the output of every ReLU and every average pool. These
    are the maps the calibrator and the spike-count expectation consume.
    Layer errors are re-raised with the layer index and name attached.
    """
    x = np.asarray(x, dtype=F32)
    if tuple(x.shape) != tuple(model.input_shape):
        raise DataError(
            f"cnn_forward: input shape {tuple(x.shape)} != model input {tuple(model.input_shape)}"
        )
    out = x
    activations: list[np.ndarray] = []
    for idx, layer in enumerate(model.layers):
        try:
            out = _apply_layer(model, layer, out)
        except DataError as exc:
            raise DataError(f"layer {idx} '{layer.name}': {exc}") from None
        if layer.kind == L.RELU:
            activations.append(out)
        elif layer.kind == L.AVGPOOL:
            activations.append(out)
    return out, activations


def _apply_layer(model, layer, x):
    kind = layer.kind
    if kind == L.INPUT:
        return x
    if kind == L.CONV2D:
        return conv2d_forward(
            x, model.params[layer.ref("weights")], model.params[layer.ref("bias")],
            int(layer.geom("stride")), int(layer.geom("padding")),
        )
    if kind == L.DENSE:
        return dense_forward(x, model.params[layer.ref("weights")], model.params[layer.ref("bias")])
    if kind == L.AVGPOOL:
        return avgpool_forward(x, int(layer.geom("window")), int(layer.geom("stride")))
    if kind == L.BATCHNORM:
        return batchnorm_forward(
            x,
            model.params[layer.ref("gamma")], model.params[layer.ref("beta")],
            model.params[layer.ref("mean")], model.params[layer.ref("variance")],
            float(layer.geom("epsilon")),
        )
    if kind == L.RELU:
        return relu(x)
    if kind == L.FLATTEN:
        return flatten(x)
    raise DataError(f"unsupported kind '{kind}'")
