"""Byte-oriented range coder with carry propagation.

32-bit range, 16-bit cumulative frequency tables, renormalization below
2**24.  The output is identical on every platform.
"""

from __future__ import annotations

import bisect

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CorruptStreamError(ValueError):
    pass


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int, bits: int = PRECISION):
        """Code the interval ``[start, start + freq)`` out of ``2**bits``."""
        r = self.range >> bits
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int):
        # raw bits, at most 16 per call
        self.encode(value, 1, nbits)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptStreamError(f"stream truncated at byte {self.pos}")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _target(self, bits: int) -> int:
        self._r = self.range >> bits
        value = self.code // self._r
        if value >= 1 << bits:
            raise CorruptStreamError("code value outside the coding interval")
        return value

    def _consume(self, start: int, freq: int):
        self.code -= self._r * start
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & 0xFFFFFFFFFF
            self.range <<= 8

    def decode(self, cdf) -> int:
        """Decode one symbol given a cumulative table ``cdf`` (length n+1, cdf[-1] = 2**16)."""
        value = self._target(PRECISION)
        s = bisect.bisect_right(cdf, value) - 1
        self._consume(cdf[s], cdf[s + 1] - cdf[s])
        return s

    def decode_bits(self, nbits: int) -> int:
        value = self._target(nbits)
        self._consume(value, 1)
        return value
