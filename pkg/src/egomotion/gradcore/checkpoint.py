"""Flat binary container of named arrays.

Layout (all integers little-endian)::

    b"GCK1"  u32 count
    repeat count times:
        u32 name_len, name (utf-8), u8 dtype code, u32 rank, u64 * rank shape,
        raw little-endian element bytes

dtype codes: 4 = float32, 8 = float64, 9 = int64.  Round trips are bit-exact.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"GCK1"
_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8"), 9: np.dtype("<i8")}
_BY_KIND = {np.dtype("float32"): 4, np.dtype("float64"): 8, np.dtype("int64"): 9}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value))
        if arr.dtype.kind in "iub" and arr.dtype != np.int64:
            arr = arr.astype(np.int64)
        code = _BY_KIND.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic: not a tensor container")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated container")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for i in range(count):
        try:
            (n,) = take("<I")
            if pos + n > len(view):
                raise CheckpointError("truncated name")
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            code, rank = take("<BI")
            if code not in _CODES:
                raise CheckpointError(f"unknown dtype code {code}")
            shape = take(f"<{rank}Q") if rank else ()
            dt = _CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError("truncated tensor data")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(shape)
            pos += nbytes
        except (CheckpointError, UnicodeDecodeError, struct.error) as exc:
            raise CheckpointError(f"record {i}: {exc}") from None
        out[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} records")
    return out


def save(path, tensors: dict):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
