"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic     b"MBECKPT\\0"
    version   u16
    meta_len  u32, followed by meta_len bytes of UTF-8 JSON
    count     u32
    count x   (name_len u16, name bytes, ndim u8, dims u32 * ndim)
    payload   float64 little-endian, tensors in name-table order
    checksum  32-byte SHA-256 over every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MBECKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in arrays.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < len(MAGIC) + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; file is corrupt")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<HI", body, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 6
    meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        table.append((name, tuple(dims)))
    arrays: dict[str, np.ndarray] = {}
    for name, dims in table:
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(dims)
        arrays[name] = arr.astype(np.float64)
        pos += 8 * n
    if pos != len(body):
        raise CheckpointError("trailing bytes after payload")
    return arrays, meta


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> str:
    blob = encode(arrays, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode(Path(path).read_bytes())
