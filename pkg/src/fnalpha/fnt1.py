"""FNT1 tensor container format.

Layout, all little-endian:

    magic bytes b"FNT1"
    u32  tensor count
    per tensor:
        u16  name length, then that many UTF-8 bytes
        u8   ndim
        u32  dims[ndim]
        f32  values[prod(dims)], row-major

Values are binary32 on disk regardless of in-memory precision, so a
save -> load -> save round trip is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["FNT1FormatError", "write_tensors", "read_tensors", "MAGIC"]

MAGIC = b"FNT1"


class FNT1FormatError(ValueError):
    """The byte stream does not parse as an FNT1 container."""


def write_tensors(path, tensors: dict) -> None:
    """Write a name -> array mapping; values are cast to float32."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    chunks = [MAGIC, struct.pack("<I", len(names))]
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise ValueError("too many dimensions")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict:
    """Parse an FNT1 file into an ordered name -> float32 array mapping."""
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise FNT1FormatError(f"truncated file: expected {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FNT1FormatError("bad magic bytes (not an FNT1 file)")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FNT1FormatError("tensor name is not valid UTF-8") from exc
        if name in out:
            raise FNT1FormatError(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n_values = 1
        for d in dims:
            n_values *= d
        raw = take(4 * n_values, f"values of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise FNT1FormatError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return out
