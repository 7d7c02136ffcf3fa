"""Export Keras CNNs into the channels-first container format.

Supported layers: InputLayer, Conv2D (valid padding, or same padding
with stride 1 and odd kernels), Dense, AveragePooling2D,
BatchNormalization, ReLU / Activation('relu'), Flatten. Anything else
(max-pooling in particular) is rejected by name. Kernels are transposed
from Keras' HWIO to OIHW, images from NHWC to NCHW, and dense kernels
that follow a flatten get their columns permuted to match the
channels-first flatten order.
"""

from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .writer import write_blobs, write_manifest


class ExportError(ValueError):
    pass


def _conv_padding(layer) -> int:
    config = layer.get_config()
    kh, kw = config["kernel_size"]
    sh, sw = config["strides"]
    if config["padding"] == "valid":
        return 0
    if config["padding"] == "same":
        if sh != 1 or sw != 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ExportError(
                f"layer '{layer.name}': 'same' padding exported only for stride 1 and odd kernels"
            )
        return (kh - 1) // 2
    raise ExportError(f"layer '{layer.name}': padding '{config['padding']}' unsupported")


def _bn_params(layer):
    """Normalise the get_weights() layout across scale/center settings."""
    config = layer.get_config()
    weights = [np.asarray(w) for w in layer.get_weights()]
    idx = 0
    if config.get("scale", True):
        gamma = weights[idx]; idx += 1
    else:
        gamma = None
    if config.get("center", True):
        beta = weights[idx]; idx += 1
    else:
        beta = None
    mean, variance = weights[idx], weights[idx + 1]
    if gamma is None:
        gamma = np.ones_like(mean)
    if beta is None:
        beta = np.zeros_like(mean)
    return gamma, beta, mean, variance, float(config["epsilon"])


def export_model(model, out_dir, name: str | None = None, extra_metadata: dict | None = None) -> Path:
    """Walk a Keras model and write the CNN container; returns its path."""
    import tensorflow as tf
    from tensorflow import keras

    if isinstance(model, (str, Path)):
        model = keras.models.load_model(model)

    in_shape = model.input_shape
    if len(in_shape) == 4:
        h, w, c = in_shape[1], in_shape[2], in_shape[3]
        container_input = [c, h, w]
        feature_hwc = (h, w, c)  # channels-last shape tracked for the flatten permutation
    elif len(in_shape) == 2:
        container_input = [int(in_shape[1])]
        feature_hwc = None
    else:
        raise ExportError(f"expected image (N,H,W,C) or flat (N,M) input, got {in_shape}")

    layers_out = [{"name": "input", "kind": "input"}]
    tensors: dict[str, np.ndarray] = {}
    flat_width = None

    def add_relu(base):
        layers_out.append({"name": f"{base}_relu", "kind": "relu"})

    for layer in model.layers:
        lname = layer.__class__.__name__
        if lname == "InputLayer":
            continue
        if lname == "Conv2D":
            config = layer.get_config()
            kernel, bias = layer.get_weights() if config["use_bias"] else (layer.get_weights()[0], None)
            if bias is None:
                bias = np.zeros(kernel.shape[-1], dtype=kernel.dtype)
            padding = _conv_padding(layer)
            stride = int(config["strides"][0])
            if config["strides"][0] != config["strides"][1]:
                raise ExportError(f"layer '{layer.name}': anisotropic strides unsupported")
            oihw = np.transpose(kernel, (3, 2, 0, 1)).astype(np.float32)
            tensors[f"{layer.name}.weights"] = oihw
            tensors[f"{layer.name}.bias"] = np.asarray(bias, dtype=np.float32)
            layers_out.append({
                "name": layer.name, "kind": "conv2d",
                "geometry": {"stride": stride, "padding": padding},
                "params": {"weights": f"{layer.name}.weights", "bias": f"{layer.name}.bias"},
            })
            kh, kw = config["kernel_size"]
            oh = (feature_hwc[0] + 2 * padding - kh) // stride + 1
            ow = (feature_hwc[1] + 2 * padding - kw) // stride + 1
            feature_hwc = (oh, ow, kernel.shape[-1])
            if config.get("activation", "linear") == "relu":
                add_relu(layer.name)
            elif config.get("activation", "linear") != "linear":
                raise ExportError(f"layer '{layer.name}': activation '{config['activation']}' unsupported")
            continue
        if lname == "BatchNormalization":
            gamma, beta, mean, variance, epsilon = _bn_params(layer)
            for slot, arr in (("gamma", gamma), ("beta", beta), ("mean", mean), ("variance", variance)):
                tensors[f"{layer.name}.{slot}"] = np.asarray(arr, dtype=np.float32)
            layers_out.append({
                "name": layer.name, "kind": "batchnorm",
                "geometry": {"epsilon": epsilon},
                "params": {slot: f"{layer.name}.{slot}" for slot in
                           ("gamma", "beta", "mean", "variance")},
            })
            continue
        if lname in ("ReLU", "Activation"):
            if lname == "Activation" and layer.get_config()["activation"] != "relu":
                raise ExportError(
                    f"layer '{layer.name}': activation '{layer.get_config()['activation']}' unsupported")
            layers_out.append({"name": layer.name, "kind": "relu"})
            continue
        if lname == "AveragePooling2D":
            config = layer.get_config()
            if config["padding"] != "valid":
                raise ExportError(f"layer '{layer.name}': pooling padding must be 'valid'")
            window = int(config["pool_size"][0])
            stride = int(config["strides"][0])
            if config["pool_size"][0] != config["pool_size"][1] or config["strides"][0] != config["strides"][1]:
                raise ExportError(f"layer '{layer.name}': anisotropic pooling unsupported")
            layers_out.append({"name": layer.name, "kind": "avgpool",
                               "geometry": {"window": window, "stride": stride}})
            fh, fw, fc = feature_hwc
            feature_hwc = ((fh - window) // stride + 1, (fw - window) // stride + 1, fc)
            continue
        if lname == "Flatten":
            layers_out.append({"name": layer.name, "kind": "flatten"})
            flat_width = int(np.prod(feature_hwc)) if feature_hwc is not None else None
            continue
        if lname == "Dense":
            config = layer.get_config()
            kernel, bias = layer.get_weights() if config["use_bias"] else (layer.get_weights()[0], None)
            if bias is None:
                bias = np.zeros(kernel.shape[-1], dtype=kernel.dtype)
            wmat = np.asarray(kernel, dtype=np.float32).T  # (out, in)
            if flat_width is not None and wmat.shape[1] == flat_width:
                fh, fw, fc = feature_hwc
                # Keras flattened h*w*c order; the container flattens c*h*w.
                perm = np.arange(flat_width).reshape(fh, fw, fc).transpose(2, 0, 1).reshape(-1)
                wmat = wmat[:, perm]
                flat_width = None
            tensors[f"{layer.name}.weights"] = wmat
            tensors[f"{layer.name}.bias"] = np.asarray(bias, dtype=np.float32)
            layers_out.append({
                "name": layer.name, "kind": "dense", "geometry": {},
                "params": {"weights": f"{layer.name}.weights", "bias": f"{layer.name}.bias"},
            })
            feature_hwc = (1, 1, kernel.shape[-1])
            if config.get("activation", "linear") == "relu":
                add_relu(layer.name)
            elif config.get("activation", "linear") != "linear":
                raise ExportError(f"layer '{layer.name}': activation '{config['activation']}' unsupported")
            continue
        raise ExportError(f"layer '{layer.name}': unsupported layer type '{lname}'")

    out_dir = Path(out_dir)
    entries = write_blobs(out_dir, tensors)
    metadata = {"source_framework": f"tensorflow-{tf.__version__}",
                "export_timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    if extra_metadata:
        metadata.update(extra_metadata)
    write_manifest(out_dir, {
        "kind": "cnn",
        "name": name or model.name,
        "input_shape": container_input,
        "metadata": metadata,
        "layers": layers_out,
        "params": entries,
    })
    return out_dir


def export_golden_logits(model, probe_images_nhwc: np.ndarray, out_dir,
                         probe_indices=None) -> Path:
    """Record the source framework's logits for cross-validation."""
    logits = np.asarray(model(probe_images_nhwc, training=False), dtype=np.float32)
    out_dir = Path(out_dir)
    entries = write_blobs(out_dir, {"golden_logits": logits,
                                    "probe_inputs": np.transpose(
                                        probe_images_nhwc, (0, 3, 1, 2)).astype(np.float32)})
    write_manifest(out_dir, {
        "kind": "golden",
        "probe_indices": list(map(int, probe_indices)) if probe_indices is not None else None,
        "params": entries,
    })
    return out_dir
