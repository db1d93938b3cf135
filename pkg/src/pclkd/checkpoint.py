"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"PCLCKPT1"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          payload: every array as raw '<f8', C order, back to back

The header is ``{"format": 1, "meta": {...}, "arrays": [{"name", "shape",
"offset", "nbytes"}, ...]}`` where ``offset`` is relative to the payload start.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"PCLCKPT1"
FORMAT_VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC"]


class CheckpointError(IOError):
    """Malformed or truncated checkpoint; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        raw = data.tobytes(order="C")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": FORMAT_VERSION, "meta": dict(meta or {}), "arrays": entries},
                        sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Return ``(arrays, meta)``; raises :class:`CheckpointError` on corruption."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16:
        raise CheckpointError(f"{path}: file too short for a checkpoint preamble", len(blob))
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}", 0)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError(f"{path}: header length {hlen} runs past end of file", 8)
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}", 16) from exc
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}", 16)

    base = 16 + hlen
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["arrays"]:
        start = base + entry["offset"]
        expected = 8 * int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != expected:
            raise CheckpointError(f"{path}: array {entry['name']!r} declares {entry['nbytes']} bytes, "
                                  f"shape needs {expected}", start)
        if start + expected > len(blob):
            raise CheckpointError(f"{path}: array {entry['name']!r} truncated", len(blob))
        arr = np.frombuffer(blob, dtype="<f8", count=expected // 8, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return arrays, header["meta"]
