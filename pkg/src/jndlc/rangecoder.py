"""Carry-propagating range coder with 48-bit state and 16-bit renormalization.

Symbols are coded against cumulative frequency tables whose total is a power
of two (``2 ** precision``).  The encoder emits big-endian 16-bit words; when
an addition to ``low`` overflows, the carry is rippled into the words already
written.  The decoder consumes exactly as many words as the encoder wrote, so
reading past the end means the payload was truncated.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

from .errors import DecodeError

STATE_BITS = 48
WORD_BITS = 16
_STATE_MASK = (1 << STATE_BITS) - 1
_WORD_MASK = (1 << WORD_BITS) - 1
_RENORM = 1 << (STATE_BITS - WORD_BITS)
_SHIFT = STATE_BITS - WORD_BITS


class RangeEncoder:
    def __init__(self, precision: int = 16):
        if not 1 <= precision <= 16:
            raise ValueError("precision must be in [1, 16]")
        self.precision = precision
        self.low = 0
        self.range = _STATE_MASK
        self.words: list[int] = []

    def encode(self, start: int, freq: int) -> None:
        """Narrow the interval to ``[start, start + freq)`` out of ``2 ** precision``."""
        if freq <= 0:
            raise ValueError("symbol frequency must be positive")
        r = self.range >> self.precision
        self.low += start * r
        self.range = r * freq
        if self.low > _STATE_MASK:
            self.low &= _STATE_MASK
            self._carry()
        while self.range < _RENORM:
            self.words.append(self.low >> _SHIFT)
            self.low = (self.low << WORD_BITS) & _STATE_MASK
            self.range <<= WORD_BITS

    def encode_symbol(self, symbol: int, cdf: Sequence[int]) -> None:
        self.encode(int(cdf[symbol]), int(cdf[symbol + 1]) - int(cdf[symbol]))

    def encode_bits(self, value: int, nbits: int) -> None:
        """Code ``nbits`` raw bits (nbits <= precision) with a flat distribution."""
        shift = self.precision - nbits
        self.encode(value << shift, 1 << shift)

    def _carry(self) -> None:
        i = len(self.words) - 1
        while i >= 0 and self.words[i] == _WORD_MASK:
            self.words[i] = 0
            i -= 1
        if i < 0:
            raise AssertionError("carry out of the first word")
        self.words[i] += 1

    def finish(self) -> bytes:
        for shift in (32, 16, 0):
            self.words.append((self.low >> shift) & _WORD_MASK)
        out = bytearray()
        for w in self.words:
            out += w.to_bytes(2, "big")
        return bytes(out)


class RangeDecoder:
    def __init__(self, data: bytes, precision: int = 16):
        if len(data) % 2:
            raise DecodeError("payload length is not a whole number of 16-bit words")
        self.precision = precision
        self._data = data
        self._pos = 0
        self.range = _STATE_MASK
        self.code = 0
        for _ in range(STATE_BITS // WORD_BITS):
            self.code = (self.code << WORD_BITS) | self._next_word()

    def _next_word(self) -> int:
        if self._pos + 2 > len(self._data):
            raise DecodeError(f"payload truncated after {self._pos} bytes")
        w = (self._data[self._pos] << 8) | self._data[self._pos + 1]
        self._pos += 2
        return w

    def target(self) -> int:
        """Scaled position of the current code value, in ``[0, 2 ** precision)``."""
        self._r = self.range >> self.precision
        v = self.code // self._r
        return min(v, (1 << self.precision) - 1)

    def consume(self, start: int, freq: int) -> None:
        r = self._r
        self.code -= start * r
        self.range = r * freq
        if self.code < 0 or self.code >= self.range:
            raise DecodeError("corrupted payload: code value left the coding interval")
        while self.range < _RENORM:
            self.code = ((self.code << WORD_BITS) | self._next_word()) & _STATE_MASK
            self.range <<= WORD_BITS

    def decode_symbol(self, cdf: Sequence[int]) -> int:
        v = self.target()
        s = bisect_right(cdf, v) - 1
        if s >= len(cdf) - 1:
            raise DecodeError("corrupted payload: target beyond table")
        self.consume(int(cdf[s]), int(cdf[s + 1]) - int(cdf[s]))
        return s

    def decode_bits(self, nbits: int) -> int:
        shift = self.precision - nbits
        value = self.target() >> shift
        self.consume(value << shift, 1 << shift)
        return value

    @property
    def bytes_consumed(self) -> int:
        return self._pos
