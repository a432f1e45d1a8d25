"""Binary tensor blob (``tensors.bin``).

Layout, all integers little-endian::

    b"RLNS1"
    repeated until EOF:
        uint32  name length in bytes
        bytes   UTF-8 name
        uint32  rank
        uint32  dims[rank]
        float32 payload (row-major, prod(dims) values)

Records are written in sorted name order so identical tensors give identical
bytes.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptBlobError

MAGIC = b"RLNS1"


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    """Parse a blob into float64 arrays (values are exactly the stored float32s)."""
    if not blob.startswith(MAGIC):
        raise CorruptBlobError("bad magic: not an RLNS1 tensor blob")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    n = len(blob)

    def take(size):
        nonlocal pos
        if pos + size > n:
            raise CorruptBlobError(f"truncated blob at byte {pos}")
        chunk = blob[pos:pos + size]
        pos += size
        return chunk

    while pos < n:
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptBlobError(f"undecodable tensor name at byte {pos}") from None
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CorruptBlobError(f"implausible rank {rank} for tensor {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4")
        if name in out:
            raise CorruptBlobError(f"tensor {name!r} appears more than once")
        out[name] = data.astype(np.float64).reshape(dims)
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_tensors(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def to_float32_exact(arr) -> np.ndarray:
    """Round to float32 and return as float64, so storage round-trips exactly."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)
