"""Binary checkpoint container.

Layout (little-endian)::

    b"VAEU" | u32 version=1 | u32 descriptor length | descriptor (UTF-8 JSON,
    sorted keys) | u64 parameter count | f64 parameters | u32 CRC32 of all
    preceding bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"VAEU"
VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(descriptor: dict, params: np.ndarray) -> bytes:
    params = np.ascontiguousarray(params, dtype="<f8")
    desc = canonical_json(descriptor)
    body = b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(desc)),
        desc,
        struct.pack("<Q", params.size),
        params.tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict, np.ndarray]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 24:
        raise CheckpointError("truncated checkpoint")
    version, dlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12 + dlen
    if len(blob) < pos + 8 + 4:
        raise CheckpointError("truncated checkpoint")
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    end = pos + 8 * count
    if len(blob) != end + 4:
        raise CheckpointError(f"payload size mismatch for {count} parameters")
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(blob[:end]) != crc:
        raise CheckpointError("CRC32 mismatch")
    descriptor = json.loads(blob[12:12 + dlen].decode("utf-8"))
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return descriptor, params


def save(path, descriptor: dict, params) -> Path:
    path = Path(path)
    path.write_bytes(encode(descriptor, params))
    return path


def load(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
