"""Range asymmetric numeral systems coder over the 16-symbol nibble alphabet.

Format constants (fixed so files are portable and byte-exact):

* 32-bit coder state, lower renormalization bound 2**23
* 8-bit renormalization units
* 12-bit table precision: counts are quantized to sum exactly 4096

An encoded stream is ``state (4 bytes little-endian) || renorm bytes`` where
the renorm bytes are laid out in decoder consumption order.  The encoder
consumes symbols back to front so the decoder streams forward; an empty
input encodes to the 4 state bytes alone.  The stream does not embed its
symbol count: callers keep it (the container stores per-brick nibble
counts), which is what makes prefix decoding and underrun detection work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numba import njit

PRECISION_BITS = 12
TOTAL_FREQ = 1 << PRECISION_BITS
STATE_LOWER = 1 << 23
NUM_SYMBOLS = 16


@dataclass(frozen=True)
class FrequencyTable:
    """Quantized symbol counts plus derived lookup tables."""

    counts: np.ndarray  # (16,) uint16, summing to 4096

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.uint16)
        if counts.shape != (NUM_SYMBOLS,):
            raise ValueError(f"expected {NUM_SYMBOLS} counts, got shape {counts.shape}")
        if int(counts.sum()) != TOTAL_FREQ:
            raise ValueError(f"counts must sum to {TOTAL_FREQ}, got {int(counts.sum())}")
        object.__setattr__(self, "counts", counts)
        cum = np.zeros(NUM_SYMBOLS + 1, dtype=np.int64)
        np.cumsum(counts, out=cum[1:])
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(
            self, "_slots", np.repeat(np.arange(NUM_SYMBOLS, dtype=np.uint8), counts)
        )

    @property
    def cumulative(self) -> np.ndarray:
        return self._cum

    @property
    def slot_symbols(self) -> np.ndarray:
        """Symbol owning each of the 4096 cumulative slots."""
        return self._slots

    @classmethod
    def uniform(cls) -> "FrequencyTable":
        return cls(np.full(NUM_SYMBOLS, TOTAL_FREQ // NUM_SYMBOLS, dtype=np.uint16))


@dataclass(frozen=True)
class TablePair:
    """One table for interior-level nibbles, one for leaf-level nibbles."""

    interior: FrequencyTable
    leaf: FrequencyTable


def quantize_counts(histogram: np.ndarray) -> np.ndarray:
    """Quantize raw counts to sum 4096 with every symbol >= 1.

    Every symbol gets a floor of 1; the remaining 4080 slots are split
    proportionally by largest remainder, ties to the lower symbol.
    """
    raw = np.asarray(histogram, dtype=np.int64)
    if raw.shape != (NUM_SYMBOLS,) or raw.min() < 0:
        raise ValueError("histogram must be 16 non-negative counts")
    if raw.sum() == 0:
        raw = np.ones(NUM_SYMBOLS, dtype=np.int64)
    spread = TOTAL_FREQ - NUM_SYMBOLS
    share = raw * spread / int(raw.sum())
    base = np.floor(share).astype(np.int64)
    remainder = share - base
    leftover = spread - int(base.sum())
    order = np.lexsort((np.arange(NUM_SYMBOLS), -remainder))
    base[order[:leftover]] += 1
    return (base + 1).astype(np.uint16)


def build_frequency_tables(
    sample_streams: Iterable[tuple[np.ndarray, np.ndarray]],
) -> TablePair:
    """Derive the static table pair from sampled bricks' raw nibble streams.

    ``sample_streams`` yields (interior nibbles, leaf nibbles) per sampled
    brick.  Histograms get +1 smoothing on all 16 symbols so nibbles absent
    from the sample subset stay encodable.
    """
    interior = np.zeros(NUM_SYMBOLS, dtype=np.int64)
    leaf = np.zeros(NUM_SYMBOLS, dtype=np.int64)
    seen = False
    for coarse, detail in sample_streams:
        seen = True
        interior += np.bincount(coarse, minlength=NUM_SYMBOLS)[:NUM_SYMBOLS]
        leaf += np.bincount(detail, minlength=NUM_SYMBOLS)[:NUM_SYMBOLS]
    if not seen:
        from .errors import ConfigError

        raise ConfigError("frequency table prepass needs at least one sampled brick")
    return TablePair(
        FrequencyTable(quantize_counts(interior + 1)),
        FrequencyTable(quantize_counts(leaf + 1)),
    )


@njit(cache=True, nogil=True)
def _encode_core(nibbles, freq, cum, buf):
    # Fills buf from the back; returns the first used index.
    ptr = buf.shape[0]
    x = STATE_LOWER
    for i in range(nibbles.shape[0] - 1, -1, -1):
        s = nibbles[i]
        f = freq[s]
        x_max = ((STATE_LOWER >> PRECISION_BITS) << 8) * f
        while x >= x_max:
            ptr -= 1
            buf[ptr] = x & 0xFF
            x >>= 8
        x = ((x // f) << PRECISION_BITS) + (x % f) + cum[s]
    for k in range(4):
        ptr -= 1
        buf[ptr] = (x >> (8 * (3 - k))) & 0xFF
    return ptr


@njit(cache=True, nogil=True)
def _decode_core(data, n_symbols, freq, cum, slots, out):
    # Returns (status, position); status 0 ok, 1 truncated stream, 2 bad
    # final state or unconsumed bytes.
    if data.shape[0] < 4:
        return 1, 0
    x = (
        np.int64(data[0])
        | (np.int64(data[1]) << 8)
        | (np.int64(data[2]) << 16)
        | (np.int64(data[3]) << 24)
    )
    pos = 4
    for i in range(n_symbols):
        slot = x & (TOTAL_FREQ - 1)
        s = slots[slot]
        x = freq[s] * (x >> PRECISION_BITS) + slot - cum[s]
        while x < STATE_LOWER:
            if pos >= data.shape[0]:
                return 1, i
            x = (x << 8) | np.int64(data[pos])
            pos += 1
        out[i] = s
    if x != STATE_LOWER or pos != data.shape[0]:
        return 2, n_symbols
    return 0, n_symbols


def rans_encode(nibbles: Sequence[int] | np.ndarray, table: FrequencyTable) -> bytes:
    """Entropy-code a nibble sequence; deterministic and byte-exact."""
    arr = np.ascontiguousarray(nibbles, dtype=np.uint8)
    if arr.size and (arr.max() >= NUM_SYMBOLS or table.counts[arr].min() == 0):
        from .errors import EncodabilityError

        bad = int(np.flatnonzero((arr >= NUM_SYMBOLS) | (table.counts[np.minimum(arr, 15)] == 0))[0])
        raise EncodabilityError(
            f"nibble {int(arr[bad])} at position {bad} has zero frequency"
        )
    buf = np.empty(2 * arr.size + 8, dtype=np.uint8)
    start = _encode_core(arr, table.counts.astype(np.int64), table.cumulative, buf)
    return buf[start:].tobytes()


def rans_decode(data: bytes, n_symbols: int, table: FrequencyTable) -> np.ndarray:
    """Decode exactly ``n_symbols`` nibbles and verify stream integrity."""
    from .errors import CorruptStreamError

    raw = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(n_symbols, dtype=np.uint8)
    status, pos = _decode_core(
        raw, n_symbols, table.counts.astype(np.int64), table.cumulative, table.slot_symbols, out
    )
    if status == 1:
        raise CorruptStreamError(f"entropy stream truncated at symbol {pos}")
    if status == 2:
        raise CorruptStreamError(
            f"entropy stream desynchronized after {n_symbols} symbols"
        )
    return out


class RansReader:
    """Pull-based forward decoder over one encoded stream.

    The consumer decides how many symbols to read (up to the stored count),
    which is what allows coarse streams to be prefix-decoded.
    """

    def __init__(self, data: bytes, table: FrequencyTable, n_symbols: int):
        from .errors import CorruptStreamError

        if len(data) < 4:
            raise CorruptStreamError("entropy stream shorter than its state word")
        self._data = data
        self._table = table
        self._remaining = n_symbols
        self._x = int.from_bytes(data[:4], "little")
        self._pos = 4
        self._read = 0

    @property
    def symbols_read(self) -> int:
        return self._read

    def next_symbol(self) -> int:
        from .errors import CorruptStreamError

        if self._remaining <= 0:
            raise CorruptStreamError(
                f"read past the encoded symbol count at symbol {self._read}"
            )
        table = self._table
        slot = self._x & (TOTAL_FREQ - 1)
        s = int(table.slot_symbols[slot])
        self._x = int(table.counts[s]) * (self._x >> PRECISION_BITS) + slot - int(
            table.cumulative[s]
        )
        while self._x < STATE_LOWER:
            if self._pos >= len(self._data):
                raise CorruptStreamError(
                    f"entropy stream truncated at symbol {self._read}"
                )
            self._x = (self._x << 8) | self._data[self._pos]
            self._pos += 1
        self._remaining -= 1
        self._read += 1
        return s

    def finish(self) -> None:
        """Assert the stream was consumed exactly (full decodes only)."""
        from .errors import CorruptStreamError

        if self._remaining or self._x != STATE_LOWER or self._pos != len(self._data):
            raise CorruptStreamError(
                f"entropy stream desynchronized after {self._read} symbols"
            )


def rans_stream_open(data: bytes, table: FrequencyTable, n_symbols: int) -> RansReader:
    return RansReader(data, table, n_symbols)
