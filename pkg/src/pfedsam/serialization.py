"""Binary parameter-map format shared by checkpoints and upload payloads.

Layout (all integers little-endian)::

    b"PFSM" | version:u8 | count:u32
    per entry: name_len:u16 | name (utf-8) | ndim:u8 | dims:u32*ndim | data:f64*prod(dims)

Entries are written in sorted name order so equal maps give equal bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"PFSM"
VERSION = 1


def _as_array(value):
    return np.asarray(getattr(value, "data", value), dtype=np.float64)


def entry_size(name: str, shape) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 8 * int(np.prod(shape, dtype=np.int64))


def serialized_size(params: Mapping) -> int:
    """Byte length of ``dumps(params)`` without building the buffer."""
    return 4 + 1 + 4 + sum(entry_size(name, _as_array(v).shape) for name, v in params.items())


def dumps(params: Mapping) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for name in sorted(params):
        arr = _as_array(params[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated {what}", pos)
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic, expected PFSM", 0)
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(8 * n, f"data of {name}"), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    if pos != len(view):
        raise FormatError("trailing bytes after last entry", pos)
    return out


def save(path, params: Mapping) -> int:
    data = dumps(params)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
