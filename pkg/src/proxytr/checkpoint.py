"""Binary tensor container ("PTRK").

Layout, all integers little-endian::

    b"PTRK" | u32 version | u32 entry count
    per entry: u32 name length | UTF-8 name | u8 dtype (0=f32, 1=f64)
               | u32 rank | u64 extent * rank | raw values
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"PTRK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a PTRK container (bad magic bytes)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry name is not UTF-8: {exc}") from None
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(bytes(take(n * dt.itemsize)), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
