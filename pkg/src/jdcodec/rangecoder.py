"""Integer range coder with 16-bit frequencies and carry propagation.

The encoder keeps a 64-bit ``low`` register and a 32-bit ``range``.  Output
bytes are held back in a cache until it is known whether a later addition
carries into them (the "delayed byte" scheme).  Values outside a table's
support are sent as the escape symbol followed by 16 raw bits holding the
value in two's complement.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

from .entropy import PRECISION, CdfTable

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
RAW_BITS = 16


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class Bitstream:
    data: bytes

    @property
    def bit_length(self) -> int:
        return 8 * len(self.data)

    def __len__(self) -> int:
        return len(self.data)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.pending = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            byte = self.cache
            while self.pending:
                self.out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self.pending -= 1
            self.cache = (low >> 24) & 0xFF
        self.pending += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, cum_lo: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * cum_lo
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_raw(self, value: int) -> None:
        self.encode(value & ((1 << RAW_BITS) - 1), 1)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # the first byte is the initial empty cache and is always zero
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("range-coded payload is truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _target(self) -> int:
        self._r = self.range >> PRECISION
        v = self.code // self._r
        if v >> PRECISION:
            raise DecodeError("corrupt range-coded payload")
        return v

    def _consume(self, cum_lo: int, freq: int) -> None:
        r = self._r
        self.code -= r * cum_lo
        self.range = r * freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8

    def decode(self, cum: Sequence[int]) -> int:
        v = self._target()
        sym = bisect_right(cum, v) - 1
        self._consume(cum[sym], cum[sym + 1] - cum[sym])
        return sym

    def decode_raw(self) -> int:
        v = self._target()
        self._consume(v, 1)
        return v - (1 << RAW_BITS) if v >> (RAW_BITS - 1) else v


def _per_symbol(tables, n: int) -> Sequence[CdfTable]:
    if isinstance(tables, CdfTable):
        return [tables] * n
    if len(tables) != n:
        raise ValueError(f"{len(tables)} tables for {n} symbols")
    return tables


def rc_encode(symbols: Sequence[int], tables: CdfTable | Sequence[CdfTable]) -> Bitstream:
    """Code integer values, each against its own table (or one shared table)."""
    tables = _per_symbol(tables, len(symbols))
    enc = RangeEncoder()
    lim = 1 << (RAW_BITS - 1)
    for value, t in zip(symbols, tables):
        value = int(value)
        lo, hi, cum = t.lo, t.hi, t.cum
        if lo <= value <= hi:
            s = value - lo
            enc.encode(cum[s], cum[s + 1] - cum[s])
        else:
            if not -lim <= value < lim:
                raise ValueError(f"value {value} does not fit the {RAW_BITS}-bit escape code")
            esc = len(cum) - 2
            enc.encode(cum[esc], cum[esc + 1] - cum[esc])
            enc.encode_raw(value)
    return Bitstream(enc.finish())


def rc_decode(bs: Bitstream | bytes, tables: CdfTable | Sequence[CdfTable], n: int) -> list[int]:
    data = bs.data if isinstance(bs, Bitstream) else bytes(bs)
    tables = _per_symbol(tables, n)
    if n == 0:
        if data:
            # an empty sequence still carries the 4-byte flush
            RangeDecoder(data)
        return []
    dec = RangeDecoder(data)
    out = []
    for t in tables:
        cum = t.cum
        s = dec.decode(cum)
        if s == len(cum) - 2:
            out.append(dec.decode_raw())
        else:
            out.append(t.lo + s)
    if dec.pos != len(data):
        raise DecodeError(f"{len(data) - dec.pos} trailing bytes after payload")
    return out
