"""Flat binary checkpoints.

Layout, all integers little-endian ``u32``::

    b"CNKT"  version  block_count
    repeated block_count times:
        name_length  name (utf-8)  rank  extent * rank  data (f64 little-endian, row-major)

Blocks hold learnable parameters followed by batch-norm running statistics.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CNKT"
VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(path, blocks) -> None:
    """Write ``(name, array)`` pairs in order."""
    out = bytearray(MAGIC)
    blocks = list(blocks)
    out += _U32.pack(VERSION) + _U32.pack(len(blocks))
    for name, arr in blocks:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out += _U32.pack(len(raw)) + raw + _U32.pack(arr.ndim)
        for extent in arr.shape:
            out += _U32.pack(extent)
        out += np.ascontiguousarray(arr).tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(buf):
            raise FormatError(f"{path}: truncated at byte {pos}")
        (v,) = _U32.unpack_from(buf, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    blocks = {}
    for _ in range(u32()):
        n = u32()
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(buf):
            raise FormatError(f"{path}: block {name!r} truncated at byte {pos}")
        blocks[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos) \
            .astype(np.float64).reshape(shape)
        pos += size
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after last block")
    return blocks
