"""Range-variant asymmetric numeral systems (rANS) over 16-bit CDF tables.

The coder keeps a 64-bit state in ``[2**32, 2**64)`` and moves 32-bit words
to and from the byte stream. Symbols are pushed in reverse so the decoder
reads them forward. A stream is laid out as::

    u64 final state | u32 words in decode order | raw bypass bytes

The 8-byte state is the only constant overhead; an empty message encodes to
exactly those 8 bytes.
"""
from __future__ import annotations

import struct
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import ContractError, CorruptionError, DecodeError
from .probability import PRECISION, QuantizedPmf

RANS_L = 1 << 32
_MASK = (1 << PRECISION) - 1
_WORD_MASK = (1 << 32) - 1
STATE_BYTES = 8


def encode_ranges(starts: Sequence[int], freqs: Sequence[int]) -> bytes:
    """Encode symbols given as ``(start, freq)`` pairs, in forward order."""
    x = RANS_L
    words: List[int] = []
    bound_base = (RANS_L >> PRECISION) << 32
    for start, freq in zip(reversed(starts), reversed(freqs)):
        if x >= bound_base * freq:
            words.append(x & _WORD_MASK)
            x >>= 32
        x = ((x // freq) << PRECISION) + (x % freq) + start
    words.reverse()
    return struct.pack("<Q", x) + struct.pack(f"<{len(words)}I", *words)


class RansDecoder:
    """Forward reader over an rANS stream; tracks how many bytes it consumed."""

    def __init__(self, data: bytes):
        if len(data) < STATE_BYTES:
            raise DecodeError(f"stream of {len(data)} bytes is shorter than the state flush")
        (self.state,) = struct.unpack_from("<Q", data, 0)
        if self.state < RANS_L:
            raise CorruptionError("initial rANS state below the renormalization bound")
        self.data = data
        self.pos = STATE_BYTES

    def peek(self) -> int:
        return self.state & _MASK

    def advance(self, start: int, freq: int) -> None:
        x = freq * (self.state >> PRECISION) + (self.state & _MASK) - start
        if x < RANS_L:
            if self.pos + 4 > len(self.data):
                raise DecodeError("truncated rANS stream")
            (word,) = struct.unpack_from("<I", self.data, self.pos)
            self.pos += 4
            x = (x << 32) | word
        self.state = x

    def finish(self) -> int:
        """Check the state returned to its initial value; return bytes consumed."""
        if self.state != RANS_L:
            raise CorruptionError("rANS state did not return to its initial value")
        return self.pos


def rans_encode(symbols: Iterable[Tuple[int, QuantizedPmf]]) -> bytes:
    """Encode ``(symbol_index, pmf)`` pairs; indices are positions in each alphabet."""
    starts, freqs = [], []
    for index, pmf in symbols:
        if not 0 <= index < pmf.alphabet_size:
            raise ContractError(f"symbol index {index} outside alphabet of {pmf.alphabet_size}")
        starts.append(pmf.start(index))
        freqs.append(pmf.freq(index))
    return encode_ranges(starts, freqs)


def rans_decode(data: bytes, pmfs: Sequence[QuantizedPmf], *, exact: bool = True) -> List[int]:
    """Decode one symbol index per PMF. With ``exact`` no trailing bytes are allowed."""
    dec = RansDecoder(data)
    out = []
    for pmf in pmfs:
        cf = dec.peek()
        index = int(np.searchsorted(pmf.cdf, cf, side="right")) - 1
        dec.advance(int(pmf.cdf[index]), int(pmf.cdf[index + 1] - pmf.cdf[index]))
        out.append(index)
    used = dec.finish()
    if exact and used != len(data):
        raise CorruptionError(f"{len(data) - used} trailing bytes after rANS payload")
    return out


# -- raw bypass channel -------------------------------------------------------

class BitWriter:
    """MSB-first bit packer; the final byte is zero-padded."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, width: int) -> None:
        if width < 0 or value < 0 or (width < 64 and value >> width):
            raise ContractError(f"value {value} does not fit in {width} bits")
        self._acc = (self._acc << width) | value
        self._nbits += width
        while self._nbits >= 8:
            self._nbits -= 8
            self._bytes.append((self._acc >> self._nbits) & 0xFF)
        self._acc &= (1 << self._nbits) - 1

    def getvalue(self) -> bytes:
        if self._nbits:
            return bytes(self._bytes) + bytes([(self._acc << (8 - self._nbits)) & 0xFF])
        return bytes(self._bytes)


class BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.bitpos = 0

    def read(self, width: int) -> int:
        end = self.bitpos + width
        if end > 8 * len(self.data):
            raise DecodeError("truncated bypass data")
        value = 0
        for i in range(self.bitpos, end):
            value = (value << 1) | ((self.data[i >> 3] >> (7 - (i & 7))) & 1)
        self.bitpos = end
        return value

    def finish(self) -> None:
        """Reject whole unread bytes or non-zero padding bits."""
        nbytes = (self.bitpos + 7) // 8
        if nbytes != len(self.data):
            raise CorruptionError(f"{len(self.data) - nbytes} unread bypass bytes")
        if self.bitpos % 8:
            tail = self.data[-1] & ((1 << (8 - self.bitpos % 8)) - 1)
            if tail:
                raise CorruptionError("non-zero bypass padding")


def bypass_encode(values: Iterable[int], bits_per_value: int) -> bytes:
    writer = BitWriter()
    for v in values:
        writer.write(int(v), bits_per_value)
    return writer.getvalue()


def bypass_decode(data: bytes, count: int, bits_per_value: int) -> List[int]:
    reader = BitReader(data)
    values = [reader.read(bits_per_value) for _ in range(count)]
    reader.finish()
    return values


# -- overflow values attached to edge symbols ---------------------------------

ESCAPE_WIDTH_BITS = 6


def write_escape(writer: BitWriter, value: int) -> None:
    """Variable-length non-negative integer: 6-bit width then the value bits."""
    width = int(value).bit_length()
    if width >= 1 << ESCAPE_WIDTH_BITS:
        raise ContractError(f"escape value {value} too large")
    writer.write(width, ESCAPE_WIDTH_BITS)
    writer.write(int(value), width)


def read_escape(reader: BitReader) -> int:
    width = reader.read(ESCAPE_WIDTH_BITS)
    return reader.read(width)


def coded_bits(payload: bytes) -> float:
    """Information carried by a stream, excluding the constant state flush.

    Equals ``8 * (len - 8) + log2(final_state) - 32``: whole words plus the
    fractional information still held in the flushed state.
    """
    (state,) = struct.unpack_from("<Q", payload, 0)
    return 8.0 * (len(payload) - STATE_BYTES) + float(np.log2(float(state))) - 32.0
