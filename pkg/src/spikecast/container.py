"""On-disk containers: manifest.json plus one raw binary blob per tensor.

A container is a directory (or a single .zip) holding a UTF-8
``manifest.json`` and, for every parameter tensor, a little-endian
row-major blob whose file name is the tensor name. Floats travel as raw
IEEE-754, so load(save(x)) is bit-exact. The same format carries CNNs,
converted SNNs, and dataset bundles, distinguished by the manifest's
``kind``. The full schema is documented in docs/container_format.md.
"""

from __future__ import annotations

import json
import re
import zipfile
from pathlib import Path

import numpy as np

from . import layers as L
from .convert import SnnLayer, SnnModel
from .errors import ModelFormatError
from .layers import LayerSpec
from .models import CnnModel, DatasetBundle

FORMAT_VERSION = "1.0"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint32": "<u4"}
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def _check_version(manifest: dict, path) -> None:
    version = manifest.get("format_version")
    if not isinstance(version, str) or "." not in version:
        raise ModelFormatError(f"{path}: missing or malformed format_version")
    major = version.split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise ModelFormatError(
            f"{path}: unsupported format_version {version} (loader understands {FORMAT_VERSION})"
        )


class _Reader:
    """Uniform access to a container directory or zip archive."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise ModelFormatError(f"container not found: {self.path}")
        self.zip = None
        if self.path.is_file():
            if not zipfile.is_zipfile(self.path):
                raise ModelFormatError(f"{self.path}: not a directory or zip container")
            self.zip = zipfile.ZipFile(self.path)

    def read(self, name: str) -> bytes:
        try:
            if self.zip is not None:
                return self.zip.read(name)
            return (self.path / name).read_bytes()
        except (KeyError, FileNotFoundError):
            raise ModelFormatError(f"{self.path}: missing blob '{name}'") from None

    def manifest(self) -> dict:
        try:
            return json.loads(self.read("manifest.json").decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{self.path}: manifest.json is not valid JSON: {exc}") from None


class _Writer:
    def __init__(self, path):
        self.path = Path(path)
        self.zip = None
        if self.path.suffix == ".zip":
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.zip = zipfile.ZipFile(self.path, "w", zipfile.ZIP_STORED)
        else:
            self.path.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, data: bytes) -> None:
        if self.zip is not None:
            # Fixed timestamp keeps archive bytes identical across reruns.
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            self.zip.writestr(info, data)
        else:
            (self.path / name).write_bytes(data)

    def close(self):
        if self.zip is not None:
            self.zip.close()


def _load_params(reader: _Reader, entries: dict, path) -> dict:
    params = {}
    for name, meta in entries.items():
        if not _NAME_RE.match(name):
            raise ModelFormatError(f"{path}: illegal tensor name '{name}'")
        dtype, shape = meta.get("dtype"), meta.get("shape")
        if dtype not in _DTYPES:
            raise ModelFormatError(f"{path}: tensor '{name}' has unsupported dtype '{dtype}'")
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 1 for d in shape):
            raise ModelFormatError(f"{path}: tensor '{name}' has malformed shape {shape}")
        raw = reader.read(name)
        arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[dtype]))
        expected = int(np.prod(shape))
        if arr.size != expected:
            raise ModelFormatError(
                f"{path}: tensor '{name}' blob holds {arr.size} values, manifest says {expected}"
            )
        params[name] = arr.reshape(shape).copy()
    return params


def _dump_params(writer: _Writer, params: dict) -> dict:
    entries = {}
    for name in sorted(params):
        arr = np.asarray(params[name])
        dtype = {np.dtype(np.float32): "float32", np.dtype(np.float64): "float64",
                 np.dtype(np.int64): "int64", np.dtype(np.uint32): "uint32"}.get(arr.dtype)
        if dtype is None:
            raise ModelFormatError(f"tensor '{name}': cannot serialise dtype {arr.dtype}")
        if not _NAME_RE.match(name):
            raise ModelFormatError(f"illegal tensor name '{name}'")
        writer.write(name, np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes())
        entries[name] = {"dtype": dtype, "shape": list(arr.shape)}
    return entries


def _json_bytes(obj: dict) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


# ---------------------------------------------------------------- CNN models

def load_model(path) -> CnnModel:
    """Load and fully validate a CNN container (shape chain included)."""
    reader = _Reader(path)
    man = reader.manifest()
    _check_version(man, path)
    if man.get("kind") != "cnn":
        raise ModelFormatError(f"{path}: manifest kind '{man.get('kind')}' is not 'cnn'")
    for key in ("name", "input_shape", "layers", "params"):
        if key not in man:
            raise ModelFormatError(f"{path}: manifest missing field '{key}'")
    layer_specs = []
    for i, entry in enumerate(man["layers"]):
        name = entry.get("name")
        kind = entry.get("kind")
        if not name or not kind:
            raise ModelFormatError(f"{path}: layer {i} missing name or kind")
        if kind not in L.LAYER_KINDS:
            raise ModelFormatError(f"{path}: layer '{name}' has unsupported kind '{kind}'")
        layer_specs.append(LayerSpec(name=name, kind=kind,
                                     geometry=dict(entry.get("geometry", {})),
                                     param_refs=dict(entry.get("params", {}))))
    params = _load_params(reader, man["params"], path)
    return CnnModel(name=man["name"], input_shape=tuple(man["input_shape"]),
                    layers=tuple(layer_specs), params=params,
                    metadata=dict(man.get("metadata", {})))


def save_model(model: CnnModel, path) -> None:
    """Write a CNN container (directory, or zip when path ends in .zip)."""
    writer = _Writer(path)
    entries = _dump_params(writer, model.params)
    man = {
        "format_version": FORMAT_VERSION,
        "kind": "cnn",
        "name": model.name,
        "input_shape": list(model.input_shape),
        "metadata": model.metadata,
        "layers": [{"name": l.name, "kind": l.kind, "geometry": l.geometry,
                    "params": l.param_refs} for l in model.layers],
        "params": entries,
    }
    writer.write("manifest.json", _json_bytes(man))
    writer.close()


# ------------------------------------------------------------------ datasets

def load_dataset(path) -> DatasetBundle:
    """Load a dataset bundle; inputs validated to [0, 1]."""
    reader = _Reader(path)
    man = reader.manifest()
    _check_version(man, path)
    if man.get("kind") != "dataset":
        raise ModelFormatError(f"{path}: manifest kind '{man.get('kind')}' is not 'dataset'")
    entries = {"inputs": man.get("inputs"), "labels": man.get("labels")}
    for key, meta in entries.items():
        if not isinstance(meta, dict):
            raise ModelFormatError(f"{path}: manifest missing tensor entry '{key}'")
    params = _load_params(reader, entries, path)
    if params["labels"].dtype != np.uint32:
        raise ModelFormatError(f"{path}: labels must be uint32")
    return DatasetBundle(inputs=params["inputs"], labels=params["labels"],
                         split_tag=man.get("split_tag", "test"))


def save_dataset(bundle: DatasetBundle, path) -> None:
    writer = _Writer(path)
    entries = _dump_params(writer, {"inputs": bundle.inputs, "labels": bundle.labels})
    man = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "split_tag": bundle.split_tag,
        "inputs": entries["inputs"],
        "labels": entries["labels"],
    }
    writer.write("manifest.json", _json_bytes(man))
    writer.close()


# ---------------------------------------------------------------- SNN models

def save_snn_model(snn: SnnModel, path) -> None:
    """Write a converted SNN container; round-trips bit-exactly."""
    writer = _Writer(path)
    params = {}
    layer_entries = []
    for i, layer in enumerate(snn.layers):
        entry = {
            "name": layer.name, "kind": layer.kind,
            "threshold": layer.threshold,
            "geometry": layer.geometry,
            "out_shape": list(layer.out_shape),
            "flatten_before": layer.flatten_before,
            "params": {},
        }
        dtype = np.int64 if snn.numeric_mode == "fixed_point" else np.float64
        if layer.weights is not None:
            tname = f"layer{i}.weights"
            params[tname] = np.asarray(layer.weights, dtype=dtype)
            entry["params"]["weights"] = tname
        if layer.bias_current is not None:
            tname = f"layer{i}.bias_current"
            bdtype = np.float64 if snn.numeric_mode == "float" else np.int64
            params[tname] = np.asarray(layer.bias_current, dtype=bdtype)
            entry["params"]["bias_current"] = tname
        if layer.pool_scale is not None:
            entry["pool_scale"] = layer.pool_scale
        layer_entries.append(entry)
    entries = _dump_params(writer, params)
    man = {
        "format_version": FORMAT_VERSION,
        "kind": "snn",
        "name": snn.name,
        "input_shape": list(snn.input_shape),
        "encoder": {"kappa0": snn.kappa0, "timesteps": snn.timesteps},
        "tre_eta": snn.tre_eta,
        "numeric_mode": snn.numeric_mode,
        "quant_bits": snn.quant_bits,
        "layers": layer_entries,
        "params": entries,
        "provenance": snn.provenance,
        "metadata": snn.metadata,
    }
    writer.write("manifest.json", _json_bytes(man))
    writer.close()


def load_snn_model(path) -> SnnModel:
    reader = _Reader(path)
    man = reader.manifest()
    _check_version(man, path)
    if man.get("kind") != "snn":
        raise ModelFormatError(f"{path}: manifest kind '{man.get('kind')}' is not 'snn'")
    params = _load_params(reader, man.get("params", {}), path)
    numeric_mode = man.get("numeric_mode", "float")
    layers = []
    for i, entry in enumerate(man["layers"]):
        refs = entry.get("params", {})
        weights = params[refs["weights"]] if "weights" in refs else None
        bias = params[refs["bias_current"]] if "bias_current" in refs else None
        kind = entry.get("kind")
        if kind not in (L.CONV2D, L.DENSE, L.AVGPOOL):
            raise ModelFormatError(f"{path}: snn layer '{entry.get('name')}' has kind '{kind}'")
        if kind != L.AVGPOOL and weights is None:
            raise ModelFormatError(f"{path}: snn layer '{entry.get('name')}' lacks weights")
        layers.append(SnnLayer(
            name=entry.get("name", f"layer{i}"), kind=kind,
            threshold=entry["threshold"],
            weights=weights, bias_current=bias,
            pool_scale=entry.get("pool_scale"),
            geometry=dict(entry.get("geometry", {})),
            out_shape=tuple(entry["out_shape"]),
            flatten_before=bool(entry.get("flatten_before", False))))
    return SnnModel(
        name=man.get("name", "snn"), input_shape=tuple(man["input_shape"]),
        layers=tuple(layers),
        kappa0=float(man["encoder"]["kappa0"]), timesteps=int(man["encoder"]["timesteps"]),
        tre_eta=float(man.get("tre_eta", 0.0)), numeric_mode=numeric_mode,
        quant_bits=man.get("quant_bits"),
        provenance=dict(man.get("provenance", {})), metadata=dict(man.get("metadata", {})))
