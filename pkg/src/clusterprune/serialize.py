"""Versioned binary model container with a JSON architecture sidecar.

Layout (all integers little-endian)::

    magic      8 bytes   b"CLPRUNE\\0"
    version    u32       FORMAT_VERSION
    header_len u32
    header     header_len bytes of UTF-8 JSON:
               {"architecture": ..., "clusters": ... | null,
                "tensors": [{"name": "<layer>/weights", "shape": [...]}, ...]}
    payload    every tensor in header order, float64 little-endian, row-major

The file must end exactly after the payload. ``save_model`` also writes
``<path>.json`` holding the header without the tensor table, for reading by
eye; the loader never needs it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .clusters import ClusterSpec
from .errors import FormatError, VersionError
from .graph import ModelGraph

MAGIC = b"CLPRUNE\0"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")


def encode_model(model: ModelGraph, clusters: ClusterSpec | None = None) -> bytes:
    tensors, blobs = [], []
    for spec in model.layers:
        if spec.name not in model.params:
            continue
        w, b = model.params[spec.name]
        for suffix, arr in (("weights", w), ("bias", b)):
            tensors.append({"name": f"{spec.name}/{suffix}", "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    header = json.dumps({
        "architecture": model.architecture(),
        "clusters": clusters.to_dict() if clusters is not None else None,
        "tensors": tensors,
    }, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def decode_model(raw: bytes) -> tuple[ModelGraph, ClusterSpec | None]:
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise FormatError("not a model container (bad magic)", 0)
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise FormatError("truncated container header", len(raw))
    version, hlen = struct.unpack_from("<II", raw, pos)
    if version != FORMAT_VERSION:
        raise VersionError(f"container version {version}, this build reads version {FORMAT_VERSION}", pos)
    pos += 8
    if len(raw) < pos + hlen:
        raise FormatError("truncated container header", len(raw))
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}", pos) from None
    header_at = pos
    pos += hlen
    if not isinstance(header, dict) or not {"architecture", "tensors"} <= header.keys():
        raise FormatError("header lacks architecture or tensor table", header_at)
    flat = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * _F64.itemsize
        if len(raw) < pos + nbytes:
            raise FormatError(f"truncated data for tensor {entry['name']!r}", len(raw))
        flat[entry["name"]] = np.frombuffer(raw, dtype=_F64, count=int(np.prod(shape)), offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} unexpected trailing bytes", pos)
    params = {}
    for key, arr in flat.items():
        layer, part = key.rsplit("/", 1)
        params.setdefault(layer, {})[part] = arr
    try:
        params = {n: (p["weights"], p["bias"]) for n, p in params.items()}
        model = ModelGraph.from_architecture(header["architecture"], params)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"inconsistent model description: {e}", header_at) from None
    clusters = ClusterSpec.from_dict(header["clusters"]) if header.get("clusters") else None
    return model, clusters


def save_model(model: ModelGraph, path, clusters: ClusterSpec | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_model(model, clusters))
    sidecar = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture(),
        "clusters": clusters.to_dict() if clusters is not None else None,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelGraph, ClusterSpec | None]:
    """Model plus the cluster spec stored with it, if any."""
    return decode_model(Path(path).read_bytes())


def load_model(path) -> ModelGraph:
    return load_checkpoint(path)[0]
