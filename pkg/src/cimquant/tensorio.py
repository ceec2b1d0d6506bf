"""Portable on-disk tensor format (``.cimt``).

Layout, little-endian, no padding::

    b"CIMT" | version u8 = 1 | dtype u8 (0 = f32) | ndim u8 | reserved u8 = 0
    ndim x u64 dims | row-major payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CIMT"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBBBB")


def encode_tensor(t) -> bytes:
    arr = np.asarray(t)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError(f"tensor must have 1..255 dims, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"all dimensions must be >= 1, got {arr.shape}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return header + dims + payload


def decode_tensor(buf: bytes, path: str | None = None) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf), path)
    magic, version, dtype, ndim, reserved = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", 5, path)
    if ndim == 0:
        raise FormatError("ndim must be >= 1", 6, path)
    if reserved != 0:
        raise FormatError("reserved byte must be 0", 7, path)
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise FormatError("truncated dimension table", len(buf), path)
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    for i, d in enumerate(dims):
        if d < 1:
            raise FormatError(f"dimension {i} is zero", off + 8 * i, path)
    off += 8 * ndim
    count = int(np.prod(dims, dtype=np.uint64))
    expected = off + 4 * count
    if len(buf) < expected:
        raise FormatError(f"truncated payload, expected {expected} bytes", len(buf), path)
    if len(buf) > expected:
        raise FormatError("trailing bytes after payload", expected, path)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    """Read a ``.cimt`` file as a float32 array."""
    return decode_tensor(Path(path).read_bytes(), str(path))
