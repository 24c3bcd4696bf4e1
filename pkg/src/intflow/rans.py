"""Range-based asymmetric numeral system coder and the stream container.

The coder is byte-oriented: a 32-bit state renormalizes one byte at a time
against a 2**23 lower bound, symbols carry 16-bit frequencies, and encoding
pushes symbols in reverse so decoding walks forward.  Tables are built on
the fly from model PMFs; a one-frequency escape slot appended to every
table routes out-of-alphabet symbols into a raw side section.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DomainError, StreamCorruptionError, StreamFormatError

PRECISION = 16
_STATE_LOWER = 1 << 23
_PMF_SUM_TOL = 1e-6


def apportion_rows(pmf: np.ndarray, total: int) -> np.ndarray:
    """Integer frequencies per row: floor at 1, largest-remainder leftovers.

    Every symbol gets one count up front; the remaining ``total - n`` counts
    go to each symbol in proportion (floored), and what is still left lands
    on the largest fractional remainders, earlier index winning ties.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    n = pmf.shape[-1]
    if n < 1 or n > total - 1:
        raise CapacityError(f"alphabet of {n} symbols does not fit in {total} counts")
    if np.any(pmf < 0) or np.any(np.abs(pmf.sum(axis=-1) - 1.0) > _PMF_SUM_TOL):
        raise DomainError("pmf rows must be non-negative and sum to 1")
    spread = total - n
    scaled = pmf * spread
    floors = np.floor(scaled)
    freqs = 1 + floors.astype(np.int64)
    leftover = total - freqs.sum(axis=-1)
    order = np.argsort(-(scaled - floors), axis=-1, kind="stable")
    bump = np.arange(n) < leftover[:, None]
    add = np.zeros_like(freqs)
    np.put_along_axis(add, order, bump.astype(np.int64), axis=-1)
    return freqs + add


@dataclass(frozen=True)
class QuantizedCdf:
    """Integer frequency table with prefix sums at a fixed precision."""

    precision: int
    freqs: np.ndarray
    cum: np.ndarray = field(default=None)  # type: ignore[assignment]
    escape: bool = False
    offset: int = 0

    def __post_init__(self) -> None:
        freqs = np.asarray(self.freqs, dtype=np.int64)
        object.__setattr__(self, "freqs", freqs)
        if np.any(freqs < 1):
            raise DomainError("every frequency must be at least 1")
        if freqs.sum() != 1 << self.precision:
            raise DomainError(f"frequencies must sum to 2**{self.precision}")
        cum = np.zeros(freqs.size + 1, dtype=np.int64)
        np.cumsum(freqs, out=cum[1:])
        object.__setattr__(self, "cum", cum)

    @property
    def symbols(self) -> int:
        return self.freqs.size - (1 if self.escape else 0)

    def span(self, index: int) -> tuple[int, int]:
        return int(self.cum[index]), int(self.freqs[index])

    def index_of_slot(self, slot: int) -> int:
        return int(np.searchsorted(self.cum, slot, side="right")) - 1


def quantize_cdf(pmf, precision: int = PRECISION) -> QuantizedCdf:
    """Quantize a PMF to integer frequencies summing to ``2**precision``."""
    freqs = apportion_rows(np.asarray(pmf, dtype=np.float64), 1 << precision)[0]
    return QuantizedCdf(precision, freqs)


def coding_table(pmf, offset: int, precision: int = PRECISION) -> QuantizedCdf:
    """Table for coding: PMF quantized to ``2**precision - 1`` plus escape."""
    freqs = apportion_rows(np.asarray(pmf, dtype=np.float64), (1 << precision) - 1)[0]
    return QuantizedCdf(
        precision, np.append(freqs, 1), escape=True, offset=offset
    )


def coding_tables_from_rows(
    rows: np.ndarray, offset: int, precision: int = PRECISION
) -> np.ndarray:
    """Frequency matrix (with escape column) for many PMF rows at once."""
    freqs = apportion_rows(rows, (1 << precision) - 1)
    escape = np.ones((freqs.shape[0], 1), dtype=np.int64)
    return np.concatenate([freqs, escape], axis=-1)


class RansEncoder:
    """LIFO entropy coder; push symbols in reverse of the decode order."""

    def __init__(self) -> None:
        self.state = _STATE_LOWER
        self._emitted = bytearray()

    def push(self, start: int, freq: int) -> None:
        if freq < 1:
            raise DomainError("cannot code a zero-frequency symbol")
        limit = ((_STATE_LOWER >> PRECISION) << 8) * freq
        while self.state >= limit:
            self._emitted.append(self.state & 0xFF)
            self.state >>= 8
        self.state = ((self.state // freq) << PRECISION) + self.state % freq + start

    def finish(self) -> bytes:
        return struct.pack("<I", self.state) + bytes(reversed(self._emitted))


class RansDecoder:
    """Mirror of :class:`RansEncoder`; pops symbols in decode order."""

    def __init__(self, payload: bytes) -> None:
        if len(payload) < 4:
            raise StreamFormatError("payload shorter than the coder state")
        (self.state,) = struct.unpack_from("<I", payload, 0)
        self._payload = payload
        self._pos = 4

    def slot(self) -> int:
        return self.state & ((1 << PRECISION) - 1)

    def pop(self, start: int, freq: int) -> None:
        self.state = freq * (self.state >> PRECISION) + self.slot() - start
        while self.state < _STATE_LOWER:
            if self._pos >= len(self._payload):
                raise StreamCorruptionError("payload exhausted mid-symbol")
            self.state = (self.state << 8) | self._payload[self._pos]
            self._pos += 1

    def assert_final(self) -> None:
        if self.state != _STATE_LOWER or self._pos != len(self._payload):
            raise StreamCorruptionError("payload does not close back to the initial state")


@dataclass(frozen=True)
class EncodedBlock:
    """rANS payload plus the raw codes that escaped the alphabet."""

    payload: bytes
    escapes: tuple[int, ...]


def encode(symbols, cdfs) -> EncodedBlock:
    """Code ``symbols`` (decode order) against one table per symbol.

    ``cdfs`` is a sequence of :class:`QuantizedCdf`, one per symbol.  With
    escape-bearing tables, out-of-alphabet symbols cost one escape slot
    plus a raw entry; without, they raise DomainError.
    """
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if len(cdfs) != symbols.size:
        raise DomainError(f"{symbols.size} symbols but {len(cdfs)} tables")
    escapes: list[int] = []
    spans: list[tuple[int, int]] = []
    for value, cdf in zip(symbols.tolist(), cdfs):
        index = value - cdf.offset
        if 0 <= index < cdf.symbols:
            spans.append(cdf.span(index))
        elif cdf.escape:
            escapes.append(value)
            spans.append(cdf.span(cdf.freqs.size - 1))
        else:
            raise DomainError(f"symbol {value} outside the table alphabet")
    enc = RansEncoder()
    for start, freq in reversed(spans):
        enc.push(start, freq)
    return EncodedBlock(enc.finish(), tuple(escapes))


def decode(block: EncodedBlock, cdfs, count: int) -> np.ndarray:
    """Exact inverse of :func:`encode` given the identical table sequence."""
    if len(cdfs) != count:
        raise DomainError(f"{count} symbols but {len(cdfs)} tables")
    dec = RansDecoder(block.payload)
    escapes = iter(block.escapes)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        cdf = cdfs[i]
        index = cdf.index_of_slot(dec.slot())
        dec.pop(*cdf.span(index))
        if cdf.escape and index == cdf.freqs.size - 1:
            try:
                out[i] = next(escapes)
            except StopIteration:
                raise StreamCorruptionError("escape section exhausted") from None
        else:
            out[i] = index + cdf.offset
    dec.assert_final()
    if next(escapes, None) is not None:
        raise StreamCorruptionError("unread entries in the escape section")
    return out


# ---------------------------------------------------------------------------
# stream container
# ---------------------------------------------------------------------------

_STREAM_MAGIC = b"IDFZ"
_STREAM_VERSION = 1
_CHECKSUM_BYTES = 8


@dataclass(frozen=True)
class CompressedStream:
    """Parsed self-describing stream: header fields plus the coded block."""

    model_hash: bytes
    shape: tuple[int, int, int, int]
    bits: int
    alphabets: tuple[tuple[int, int], ...]
    block: EncodedBlock


def pack_stream(stream: CompressedStream) -> bytes:
    """Serialize to the canonical little-endian byte layout."""
    if len(stream.model_hash) != 32:
        raise DomainError("model hash must be 32 bytes")
    head = [
        _STREAM_MAGIC,
        struct.pack("<H", _STREAM_VERSION),
        stream.model_hash,
        struct.pack("<4I", *stream.shape),
        struct.pack("<B", stream.bits),
        struct.pack("<B", len(stream.alphabets)),
    ]
    for lo, hi in stream.alphabets:
        head.append(struct.pack("<2i", lo, hi))
    head.append(struct.pack("<Q", len(stream.block.payload)))
    head.append(stream.block.payload)
    head.append(struct.pack("<I", len(stream.block.escapes)))
    for value in stream.block.escapes:
        head.append(struct.pack("<i", value))
    body = b"".join(head)
    return body + hashlib.sha256(body).digest()[:_CHECKSUM_BYTES]


def unpack_stream(raw: bytes) -> CompressedStream:
    """Parse and verify a serialized stream."""
    if len(raw) < 4 + 2 + 32 + 16 + 2 + 8 + 4 + _CHECKSUM_BYTES:
        raise StreamFormatError("stream too short")
    if raw[:4] != _STREAM_MAGIC:
        raise StreamFormatError("bad magic; not a compressed stream")
    body, checksum = raw[:-_CHECKSUM_BYTES], raw[-_CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest()[:_CHECKSUM_BYTES] != checksum:
        raise StreamCorruptionError("stream checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != _STREAM_VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    model_hash = body[off : off + 32]
    off += 32
    shape = struct.unpack_from("<4I", body, off)
    off += 16
    (bits,) = struct.unpack_from("<B", body, off)
    off += 1
    (n_alpha,) = struct.unpack_from("<B", body, off)
    off += 1
    alphabets = []
    for _ in range(n_alpha):
        lo, hi = struct.unpack_from("<2i", body, off)
        off += 8
        alphabets.append((lo, hi))
    (payload_len,) = struct.unpack_from("<Q", body, off)
    off += 8
    if off + payload_len + 4 > len(body):
        raise StreamFormatError("declared payload length overruns the stream")
    payload = body[off : off + payload_len]
    off += payload_len
    (n_escape,) = struct.unpack_from("<I", body, off)
    off += 4
    if off + 4 * n_escape != len(body):
        raise StreamFormatError("escape section length mismatch")
    escapes = struct.unpack_from(f"<{n_escape}i", body, off)
    return CompressedStream(
        model_hash, tuple(int(s) for s in shape), int(bits), tuple(alphabets),
        EncodedBlock(payload, tuple(int(e) for e in escapes)),
    )
