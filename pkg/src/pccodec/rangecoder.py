"""Bit-exact range coder plus raw bit packing.

The coder is a 64-bit-low / 32-bit-range coder with 16-bit probability
precision and byte-wise renormalization (carry handled LZMA-style through a
byte cache). Integer-only state: identical inputs produce identical bytes on
any platform. The leading byte of the raw coder output is always zero and is
dropped; the decoder starts from a 4-byte window, so an empty message costs
exactly 4 bytes.

Binary symbols are coded against a probability p16/65536 of the symbol being
1 (p16 in [1, 65535]). Multi-symbol coding uses cumulative counts with total
65536 and every bucket >= 1; the top bucket absorbs the renormalization
remainder so no code space is wasted.
"""

from __future__ import annotations

import math

import numpy as np

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
PROB_ONE = 1 << 16


class DecodeError(Exception):
    """Exhausted or inconsistent coder payload."""


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self):
        if self._low < 0xFF000000 or self._low > MASK32:
            carry = self._low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self._low >> 24) & 0xFF
        self._cache_size += 1
        self._low = (self._low << 8) & MASK32

    def encode_bit(self, p16: int, bit: int):
        bound = (self._range >> 16) * p16
        if bit:
            self._range = bound
        else:
            self._low += bound
            self._range -= bound
        while self._range < TOP:
            self._shift_low()
            self._range = (self._range << 8) & MASK32

    def encode_symbol(self, cum_lo: int, cum_hi: int):
        r = self._range >> 16
        self._low += r * cum_lo
        if cum_hi == PROB_ONE:
            self._range -= r * cum_lo
        else:
            self._range = r * (cum_hi - cum_lo)
        while self._range < TOP:
            self._shift_low()
            self._range = (self._range << 8) & MASK32

    def consumed_bits(self) -> float:
        """Fractional bits committed so far (monotone; excludes flush margin)."""
        return 8.0 * (len(self._out) + self._cache_size - 1) + (
            32.0 - math.log2(self._range + 1)
        )

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # The first byte is the initial zero cache; the decoder never needs it.
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = MASK32
        self._code = 0
        for _ in range(4):
            self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("range coder payload truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_bit(self, p16: int) -> int:
        bound = (self._range >> 16) * p16
        if self._code < bound:
            bit = 1
            self._range = bound
        else:
            bit = 0
            self._code -= bound
            self._range -= bound
        while self._range < TOP:
            self._code = ((self._code << 8) | self._next_byte()) & MASK32
            self._range = (self._range << 8) & MASK32
        return bit

    def decode_symbol(self, cum: np.ndarray) -> int:
        """cum is the (M+1,) int cumulative table with cum[0]=0, cum[M]=65536."""
        r = self._range >> 16
        v = self._code // r
        if v > 0xFFFF:
            v = 0xFFFF
        s = int(np.searchsorted(cum, v, side="right")) - 1
        cum_lo = int(cum[s])
        cum_hi = int(cum[s + 1])
        self._code -= r * cum_lo
        if cum_hi == PROB_ONE:
            self._range -= r * cum_lo
        else:
            self._range = r * (cum_hi - cum_lo)
        while self._range < TOP:
            self._code = ((self._code << 8) | self._next_byte()) & MASK32
            self._range = (self._range << 8) & MASK32
        return s


def quantize_prob(p: np.ndarray) -> np.ndarray:
    """Map float probabilities to p16 in [1, 65535] (round half up)."""
    p16 = np.floor(np.asarray(p, np.float64) * PROB_ONE + 0.5).astype(np.int64)
    return np.clip(p16, 1, PROB_ONE - 1)


def bit_cost_bits(p16: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Ideal code length of each binary symbol under its quantized prob."""
    p16 = np.asarray(p16, np.float64)
    p1 = p16 / PROB_ONE
    return np.where(np.asarray(bits) != 0, -np.log2(p1), -np.log2(1.0 - p1))


def encode_bits(symbols: np.ndarray, probs16: np.ndarray) -> bytes:
    """One-shot binary stream: decode_bits(encode_bits(s, p), p) == s."""
    if len(symbols) != len(probs16):
        raise ValueError("symbols and probs must align")
    enc = RangeEncoder()
    for p16, b in zip(probs16.tolist(), np.asarray(symbols).tolist()):
        enc.encode_bit(p16, b)
    return enc.finish()


def decode_bits(data: bytes, probs16: np.ndarray) -> np.ndarray:
    dec = RangeDecoder(data)
    out = np.empty(len(probs16), dtype=np.uint8)
    for i, p16 in enumerate(probs16.tolist()):
        out[i] = dec.decode_bit(p16)
    return out


class BitSink:
    """MSB-first bit packer over a growable byte buffer."""

    def __init__(self):
        self._bytes = bytearray()
        self._cur = 0
        self._nbits = 0

    def write(self, value: int, nbits: int):
        for i in range(nbits - 1, -1, -1):
            self._cur = (self._cur << 1) | ((value >> i) & 1)
            self._nbits += 1
            if self._nbits == 8:
                self._bytes.append(self._cur)
                self._cur = 0
                self._nbits = 0

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nbits:
            out.append(self._cur << (8 - self._nbits))
        return bytes(out)


class BitSource:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read(self, nbits: int) -> int:
        v = 0
        for _ in range(nbits):
            byte_i, bit_i = divmod(self._pos, 8)
            if byte_i >= len(self._data):
                raise DecodeError("bit stream truncated")
            v = (v << 1) | ((self._data[byte_i] >> (7 - bit_i)) & 1)
            self._pos += 1
        return v
