"""Binary parameter checkpoints.

Layout: magic ``QRWT``, a version byte, then one record per tensor in
lexicographic name order::

    u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f64 payload

All integers and floats are little-endian.
"""
from __future__ import annotations

import io
import struct
from typing import Dict, Mapping

import numpy as np

from .errors import FormatError
from .fileutil import atomic_write_bytes

MAGIC = b"QRWT"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"rank {arr.ndim} too large for {name}")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise FormatError("not a QRWT checkpoint (bad magic)")
    if len(data) < 5 or data[4] != VERSION:
        raise FormatError(f"unsupported checkpoint version {data[4] if len(data) > 4 else None}")
    pos = 5
    out: Dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise FormatError("truncated tensor name")
            pos += name_len
            rank = data[pos]
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = pos + 8 * count
            if end > len(data):
                raise FormatError(f"truncated payload for {name}")
            out[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
            pos = end
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(tensors))


def load(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
