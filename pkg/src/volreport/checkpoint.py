"""Checkpoint persistence: JSON manifest plus one little-endian binary blob.

The manifest maps tensor name to shape, dtype and byte offset into
``weights.bin``. Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
FORMAT_TAG = "volreport-checkpoint/1"

_DTYPE_TAGS = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
}
_TAG_DTYPES = {name: np.dtype(tag) for name, tag in _DTYPE_TAGS.items()}


def save_checkpoint(
    path,
    tensors: Mapping[str, "Tensor | np.ndarray"],
    configs: dict | None = None,
) -> Path:
    """Write tensors and config metadata to a checkpoint directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPE_TAGS:
            raise FormatError(f"cannot checkpoint dtype {arr.dtype} for tensor '{name}'")
        raw = np.ascontiguousarray(arr).astype(_DTYPE_TAGS[dtype_name], copy=False).tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": dtype_name,
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT_TAG,
        "byte_order": "little",
        "tensors": entries,
        "configs": configs or {},
    }
    (path / BLOB_NAME).write_bytes(b"".join(chunks))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint directory back into arrays plus its manifest."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT_TAG:
        raise FormatError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    blob = (path / BLOB_NAME).read_bytes()
    tensors = {}
    for name, ent in manifest["tensors"].items():
        dt = _TAG_DTYPES.get(ent["dtype"])
        if dt is None:
            raise FormatError(f"unknown dtype {ent['dtype']!r} for tensor '{name}'")
        start, nbytes = ent["offset"], ent["nbytes"]
        if start + nbytes > len(blob):
            raise FormatError(f"blob truncated: tensor '{name}' needs {start + nbytes} bytes")
        arr = np.frombuffer(blob[start : start + nbytes], dtype=dt)
        tensors[name] = arr.reshape(ent["shape"]).astype(ent["dtype"], copy=True)
    return tensors, manifest
