"""Single-file checkpoints: JSON manifest followed by raw float64 payload.

Layout::

    8 bytes   magic b"MDFNCKPT"
    8 bytes   little-endian uint64, manifest length L
    L bytes   UTF-8 JSON manifest
    ...       payload: concatenated little-endian float64 arrays

Each manifest entry records ``name``, ``shape`` and ``offset`` / ``nbytes``
relative to the start of the payload, so round trips are bit-exact.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MDFNCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {"format": "mdfn-checkpoint", "version": FORMAT_VERSION, "tensors": entries, "meta": dict(meta or {})}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        return _read_head(fh)[0]


def _read_head(fh):
    if fh.read(8) != MAGIC:
        raise CheckpointError("not an MDFN checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", fh.read(8))
    manifest = json.loads(fh.read(n).decode("utf-8"))
    return manifest, 16 + n


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``."""
    raw = Path(path).read_bytes()
    manifest, start = _read_head(io.BytesIO(raw))
    arrays = {}
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        buf = raw[lo : lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return arrays, manifest.get("meta", {})
