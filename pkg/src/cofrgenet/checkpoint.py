"""Versioned binary container for named arrays.

Layout::

    b"CFGN" | u32 version | u64 header length | JSON header | array payloads

All integers are little-endian. The header carries caller metadata, an index
of ``(name, dtype, shape, offset, nbytes)`` entries and a CRC32 of the
payload. Arrays are stored as raw little-endian bytes in index order.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CFGN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted container."""


class CheckpointVersionError(CheckpointError):
    pass


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically: the target is replaced only once the file is complete."""
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta, "arrays": index, "payload_bytes": offset,
                         "crc32": zlib.crc32(payload)}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a whole container; raises before returning anything partial."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated ({len(blob)} bytes, shorter than the fixed prefix)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads version {VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError(f"{path}: truncated inside the header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    payload = blob[start:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header["meta"], arrays
