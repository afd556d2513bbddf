"""Tensor-table container used for checkpoints, sampled latents and corpus dumps.

Layout (all integers little-endian)::

    b"APLO"                          magic
    u32   format version (1)
    u64   config text length, then that many UTF-8 bytes
    repeated until end of file:
        u32  name length, UTF-8 name
        u8   dtype code (0 = f32, 1 = f64)
        u8   rank
        u64  x rank dims
        raw little-endian values, row-major
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"APLO"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray], config_text: str = "") -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = config_text.encode("utf-8")
    parts += [struct.pack("<Q", len(blob)), blob]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        dt = np.dtype(f"<f{arr.dtype.itemsize}")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r}: rank {arr.ndim} too large")
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw_name)), raw_name,
                  struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(arr, dtype=dt).tobytes()]
    return b"".join(parts)


def decode(buf: bytes) -> tuple[str, dict[str, np.ndarray]]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated file: needed {n} bytes at offset {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not a tensor-table file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} (this build reads {VERSION})")
    (blob_len,) = struct.unpack("<Q", take(8))
    config_text = bytes(take(blob_len)).decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        dt = _CODE_DTYPES[code]
        count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        data = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(dims).copy()
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = data
    return config_text, tensors


def save(path, tensors: Mapping[str, np.ndarray], config_text: str = "") -> None:
    data = encode(tensors, config_text)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
