"""Versioned binary checkpoint container.

Layout::

    magic    8 bytes   b"PSDCKPT\\0"
    version  uint32 LE
    hlen     uint64 LE
    header   hlen bytes of UTF-8 JSON
    payload  little-endian float32 buffers, concatenated in manifest order

The header holds the network spec, a manifest of ``{name, shape, offset,
nbytes}`` entries, free-form metadata and the SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"PSDCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save(path, spec: dict, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": spec,
        "manifest": manifest,
        "meta": meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def load(path) -> Tuple[dict, "OrderedDict[str, np.ndarray]", dict]:
    """Return ``(spec, arrays, meta)``; raises :class:`CheckpointError` on corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[start + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = OrderedDict()
    for entry in header["manifest"]:
        o, nb = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[o : o + nb], dtype="<f4").astype(np.float32)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return header["spec"], arrays, header["meta"]
