"""Versioned binary parameter checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    magic      8 bytes  b"VMCKPT\\x00\\x00"
    version    u32      currently 1
    count      u32      number of named tensors
    per tensor, in file order:
        name_len  u32
        name      name_len bytes, UTF-8
        rank      u32
        extents   rank x u32
        values    prod(extents) x float64, little-endian, row-major
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"VMCKPT\x00\x00"
VERSION = 1


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(data: bytes, source="<bytes>") -> "OrderedDict[str, np.ndarray]":
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not a checkpoint")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        out[name] = values.reshape(shape)
    if pos != len(data):
        raise CheckpointError(f"{source}: trailing bytes after {count} tensors")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> "OrderedDict[str, np.ndarray]":
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: unreadable ({exc.strerror})") from exc
    return decode(data, path)
