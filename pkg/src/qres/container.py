"""The ``.qres`` coded-image container.

Byte layout (little-endian)::

    "QRES" | u8 version | u8 mode | u32 width | u32 height | u8 model_id
    | u8 lambda_code | u8 num_streams | (u32 length | payload) * num_streams
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List

from .errors import FormatError

MAGIC = b"QRES"
VERSION = 1
MODE_LOSSY = 0
MODE_LOSSLESS = 1
_HEADER = struct.Struct("<4sBBIIBBB")
HEADER_BYTES = _HEADER.size
STREAM_LENGTH_BYTES = 4


@dataclass
class CodedImage:
    width: int
    height: int
    model_id: int
    lambda_code: int = 0
    mode: int = MODE_LOSSY
    streams: List[bytes] = field(default_factory=list)

    @property
    def num_streams(self) -> int:
        return len(self.streams)

    @property
    def pixels(self) -> int:
        return self.width * self.height

    def to_bytes(self) -> bytes:
        return container_write(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodedImage":
        return container_read(data)

    def header_bits(self) -> int:
        return 8 * HEADER_BYTES

    def total_bits(self) -> int:
        return 8 * (HEADER_BYTES + sum(STREAM_LENGTH_BYTES + len(s) for s in self.streams))

    def bpp(self) -> float:
        return self.total_bits() / self.pixels


def container_write(img: CodedImage) -> bytes:
    if img.mode not in (MODE_LOSSY, MODE_LOSSLESS):
        raise FormatError(f"unknown mode {img.mode}")
    if not (0 < img.width < 1 << 32 and 0 < img.height < 1 << 32):
        raise FormatError(f"bad image size {img.width}x{img.height}")
    if not (0 <= img.model_id < 256 and 0 <= img.lambda_code < 256 and img.num_streams < 256):
        raise FormatError("header field out of byte range")
    parts = [_HEADER.pack(MAGIC, VERSION, img.mode, img.width, img.height,
                          img.model_id, img.lambda_code, img.num_streams)]
    for payload in img.streams:
        parts.append(struct.pack("<I", len(payload)))
        parts.append(bytes(payload))
    return b"".join(parts)


def container_read(data: bytes) -> CodedImage:
    if len(data) < HEADER_BYTES:
        raise FormatError("truncated container header")
    magic, version, mode, width, height, model_id, lambda_code, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad magic; not a .qres file")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if mode not in (MODE_LOSSY, MODE_LOSSLESS):
        raise FormatError(f"unknown mode {mode}")
    if width == 0 or height == 0:
        raise FormatError("zero image dimension")
    pos = HEADER_BYTES
    streams = []
    for i in range(count):
        if pos + STREAM_LENGTH_BYTES > len(data):
            raise FormatError(f"truncated length of stream {i}")
        (length,) = struct.unpack_from("<I", data, pos)
        pos += STREAM_LENGTH_BYTES
        if pos + length > len(data):
            raise FormatError(f"truncated payload of stream {i}")
        streams.append(bytes(data[pos:pos + length]))
        pos += length
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last stream")
    return CodedImage(width=width, height=height, model_id=model_id, lambda_code=lambda_code,
                      mode=mode, streams=streams)
