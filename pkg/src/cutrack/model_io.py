"""Model file container: "CUTM" magic, version, JSON manifest, float blob.

Layout: 4-byte magic ``CUTM``, u32 LE version (1), u64 LE manifest length,
the manifest JSON (UTF-8), then a blob of little-endian 8-byte reals. The
manifest lists parameter names, shapes and byte offsets into the blob, plus
an opaque ``config`` object the caller uses to rebuild the model.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .autograd import Parameter

MAGIC = b"CUTM"
VERSION = 1


def atomic_write_bytes(path: str, payload: bytes):
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(path: str, params: list[Parameter], config: dict):
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in model")
    entries = []
    blob = bytearray()
    for p in sorted(params, key=lambda p: p.name):
        entries.append({"name": p.name, "shape": list(p.data.shape), "offset": len(blob)})
        blob.extend(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    manifest = {"format": "CUTM", "version": VERSION, "config": config, "params": entries}
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(manifest_bytes))
    atomic_write_bytes(path, header + manifest_bytes + bytes(blob))


def load_model(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a model file; returns (config, {name: array})."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ValueError(f"bad magic in model file {path!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise ValueError(f"unsupported model format version {version}")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + mlen:
        raise ValueError(f"truncated model file {path!r}")
    manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    blob = raw[16 + mlen :]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise ValueError(f"truncated model blob for parameter {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).astype(np.float64)
    return manifest["config"], tensors
