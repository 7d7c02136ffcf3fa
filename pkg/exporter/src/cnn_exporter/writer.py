"""Minimal writer for the container format (manifest.json + raw blobs).

Deliberately self-contained: the container layout is the wire contract
with the conversion toolkit, and this module is the producing side of
it. Blobs are little-endian row-major; floats raw IEEE-754.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1.0"

_DTYPE_TAGS = {
    np.dtype(np.float32): ("float32", "<f4"),
    np.dtype(np.float64): ("float64", "<f8"),
    np.dtype(np.int64): ("int64", "<i8"),
    np.dtype(np.uint32): ("uint32", "<u4"),
}


def write_blobs(path, tensors: dict) -> dict:
    """Write one raw blob per tensor; returns their manifest entries."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise ValueError(f"tensor '{name}': unsupported dtype {arr.dtype}")
        tag, wire = _DTYPE_TAGS[arr.dtype]
        (out / name).write_bytes(arr.astype(wire).tobytes())
        entries[name] = {"dtype": tag, "shape": list(arr.shape)}
    return entries


def write_manifest(path, manifest: dict) -> None:
    manifest = dict(manifest)
    manifest.setdefault("format_version", FORMAT_VERSION)
    (Path(path) / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
