"""NICP parameter checkpoint codec.

Layout (little-endian)::

    magic  b"NICP"
    u16    format version (1)
    u32    entry count
    entry* u32 name byte length, UTF-8 name,
           u32 rank, u32 extent per axis,
           binary64 values in row-major order
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"NICP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic, not an NICP checkpoint")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointError(f"unsupported NICP version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path: Union[str, Path], arrays: Mapping[str, np.ndarray]) -> bytes:
    blob = dumps(arrays)
    Path(path).write_bytes(blob)
    return blob


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def digest(blob: bytes) -> bytes:
    """32-byte SHA-256 of a serialized checkpoint."""
    return hashlib.sha256(blob).digest()
