"""Cache-line codecs for byte-granular memory blacklisting.

A 64-byte line that contains blacklisted ("security") bytes can be held in
four interchangeable formats:

* bitvector-8B (:class:`CaliLine`): the canonical form pairing each byte
  with one metadata bit.  This is what the L1 model operates on.
* sentinel (:class:`EncodedLine`): one metadata bit for the whole line.
  Security-byte locations are packed into the first four payload bytes and,
  past the fourth, marked in place with a 6-bit sentinel pattern that is
  guaranteed (by pigeonhole over at most 63 distinct data bytes) not to
  collide with any plain data byte's low six bits.  Used from L2 outward.
* bitvector-4B (:class:`ChunkedLine4B`) and bitvector-1B
  (:class:`ChunkedLine1B`): chunked variants that keep each 8-byte chunk's
  bit vector inside one of the chunk's own security bytes, trading decode
  latency for metadata storage.

Encoders are pure functions; decoders raise :class:`CodecError` on
internally inconsistent metadata, which a memory model should surface as a
corrupted-line fault.  The exact bit layouts are documented in
``docs/encodings.md``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar, Iterable, NamedTuple

LINE_BYTES = 64
CHUNK_BYTES = 8
CHUNKS_PER_LINE = LINE_BYTES // CHUNK_BYTES

# Header geometry of the sentinel format: the two count bits in byte 0
# encode min(k, 4) - 1 and the header then occupies exactly min(k, 4) bytes.
COUNT_SHIFT = 2
LOC_BITS = 6
SENTINEL_SHIFT = 26
LOW6 = 0x3F


class CodecError(ValueError):
    """Line metadata is malformed or internally inconsistent."""


def _check_payload(data: bytes | bytearray) -> bytes:
    b = bytes(data)
    if len(b) != LINE_BYTES:
        raise ValueError(f"expected {LINE_BYTES} bytes, got {len(b)}")
    return b


@dataclass(frozen=True)
class CaliLine:
    """A 64-byte line in bitvector form: one security flag per byte.

    ``mask[i]`` is True when byte ``i`` is a security byte.  Security bytes
    carry no program data; the surrounding system keeps their data at 0x00
    and any decoder in this module restores them to 0x00.
    """

    data: bytes
    mask: tuple[bool, ...]

    METADATA_BITS: ClassVar[int] = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _check_payload(self.data))
        mask = tuple(bool(m) for m in self.mask)
        if len(mask) != LINE_BYTES:
            raise ValueError(f"mask must have {LINE_BYTES} entries, got {len(mask)}")
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_security_offsets(cls, data: bytes, offsets: Iterable[int]) -> CaliLine:
        marked = frozenset(offsets)
        return cls(data, tuple(i in marked for i in range(LINE_BYTES)))

    @property
    def califormed(self) -> bool:
        return any(self.mask)

    @property
    def security_count(self) -> int:
        return sum(self.mask)

    @property
    def security_indices(self) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.mask) if m)


@dataclass(frozen=True)
class EncodedLine:
    """Sentinel-format line: 64 payload bytes plus one califormed bit.

    When ``califormed`` is False the payload is the original data verbatim.
    """

    payload: bytes
    califormed: bool

    METADATA_BITS: ClassVar[int] = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "payload", _check_payload(self.payload))
        object.__setattr__(self, "califormed", bool(self.califormed))


class ChunkMeta4B(NamedTuple):
    califormed: bool
    holder_index: int  # chunk-relative position of the bit-vector byte; 0 when not califormed


@dataclass(frozen=True)
class ChunkedLine4B:
    """bitvector-4B line: eight 8-byte chunks, 4 metadata bits per chunk.

    A califormed chunk stores its 8-bit security vector inside the chunk's
    first security byte (the holder); ``holder_index`` records where.
    """

    payload: bytes
    chunk_meta: tuple[ChunkMeta4B, ...]

    METADATA_BITS: ClassVar[int] = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "payload", _check_payload(self.payload))
        meta = tuple(ChunkMeta4B(bool(c), int(h)) for c, h in self.chunk_meta)
        if len(meta) != CHUNKS_PER_LINE:
            raise ValueError(f"need {CHUNKS_PER_LINE} chunk records, got {len(meta)}")
        for c, h in meta:
            if not 0 <= h < CHUNK_BYTES:
                raise ValueError(f"holder index {h} out of range")
        object.__setattr__(self, "chunk_meta", meta)


@dataclass(frozen=True)
class ChunkedLine1B:
    """bitvector-1B line: one metadata bit per 8-byte chunk.

    A califormed chunk keeps its 8-bit security vector in the chunk's byte 0;
    if byte 0 held normal data, that value is parked in the chunk's last
    security byte.
    """

    payload: bytes
    chunk_meta: tuple[bool, ...]

    METADATA_BITS: ClassVar[int] = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "payload", _check_payload(self.payload))
        meta = tuple(bool(c) for c in self.chunk_meta)
        if len(meta) != CHUNKS_PER_LINE:
            raise ValueError(f"need {CHUNKS_PER_LINE} chunk flags, got {len(meta)}")
        object.__setattr__(self, "chunk_meta", meta)


class SentinelHeader(NamedTuple):
    """Fields recoverable from the first four payload bytes alone."""

    count_code: int                 # 0b00..0b11 -> one, two, three, four-or-more
    locations: tuple[int, ...]      # first min(k, 4) security-byte indices, ascending
    sentinel: int | None            # present only for count_code 0b11


def find_sentinel(line: CaliLine) -> int:
    """Pick the line's sentinel: the smallest 6-bit value whose pattern does
    not appear in the low six bits of any non-security byte.

    At most 63 bytes are non-security once the line holds a security byte, so
    one of the 64 patterns is always free.
    """
    used = 0
    security = 0
    data = line.data
    for i, is_sec in enumerate(line.mask):
        if is_sec:
            security += 1
        else:
            used |= 1 << (data[i] & LOW6)
    if not security:
        raise CodecError("sentinel undefined: line has no security bytes")
    for value in range(64):
        if not used & (1 << value):
            return value
    raise AssertionError("unreachable: 64 distinct patterns in at most 63 bytes")


def _displacement(mask: tuple[bool, ...] | None, locations: list[int],
                  security: set[int] | None = None) -> list[tuple[int, int]]:
    """Pairs (header position, holder location) for displaced header bytes.

    The header overwrites payload bytes ``0 .. len(locations)-1``.  Only the
    non-security bytes among those carry data worth preserving; they are
    parked, order preserved, in the security-byte locations that lie outside
    the header span.  Both sides have the same cardinality, so the pairing is
    total and a decoder can rebuild it from the header alone.
    """
    header_len = len(locations)
    if security is None:
        security = {i for i in range(header_len) if mask[i]}  # type: ignore[index]
    sources = [p for p in range(header_len) if p not in security]
    holders = [loc for loc in locations if loc >= header_len]
    return list(zip(sources, holders))


def encode_sentinel(line: CaliLine) -> EncodedLine:
    """Convert a bitvector line to the sentinel wire format.

    Lines without security bytes pass through verbatim with the califormed
    bit clear.  Otherwise the count field and the first min(k, 4) locations
    (plus, for k >= 4, the sentinel) are packed into payload bytes 0..3, the
    displaced header data moves into security-byte locations, and every
    security byte past the fourth is stamped with the sentinel pattern.
    """
    locations = [i for i, m in enumerate(line.mask) if m]
    if not locations:
        return EncodedLine(line.data, False)

    k = len(locations)
    header_locs = locations[: min(k, 4)]
    payload = bytearray(line.data)

    for src, holder in _displacement(line.mask, header_locs):
        payload[holder] = line.data[src]

    if k >= 4:
        sentinel = find_sentinel(line)
        for loc in locations[4:]:
            payload[loc] = sentinel  # low 6 bits = sentinel, high 2 bits = 0
    else:
        sentinel = None

    header = len(header_locs) - 1
    for i, loc in enumerate(header_locs):
        header |= loc << (COUNT_SHIFT + LOC_BITS * i)
    if sentinel is not None:
        header |= sentinel << SENTINEL_SHIFT
    packed = header.to_bytes(4, "little")
    payload[: len(header_locs)] = packed[: len(header_locs)]

    return EncodedLine(bytes(payload), True)


def decode_sentinel_header(payload: bytes) -> SentinelHeader:
    """Decode the count field, explicit locations and sentinel of a
    califormed sentinel line from its first four bytes only.

    This is the critical-word-first path: it must agree with
    :func:`decode_sentinel` without seeing bytes 4..63.
    """
    if len(payload) < 4:
        raise CodecError("need at least the first four payload bytes")
    header = int.from_bytes(payload[:4], "little")
    count_code = header & 0b11
    n = count_code + 1
    locations = tuple((header >> (COUNT_SHIFT + LOC_BITS * i)) & LOW6 for i in range(n))
    for prev, cur in zip(locations, locations[1:]):
        if cur <= prev:
            raise CodecError(
                f"security-byte locations {locations} not strictly ascending"
            )
    sentinel = (header >> SENTINEL_SHIFT) & LOW6 if count_code == 0b11 else None
    return SentinelHeader(count_code, locations, sentinel)


def decode_sentinel(enc: EncodedLine) -> CaliLine:
    """Invert :func:`encode_sentinel`.

    Security-byte positions decode to data 0x00: the vacated holder
    locations are zeroed and security bytes never carry meaningful data.
    """
    if not enc.califormed:
        return CaliLine(enc.payload, (False,) * LINE_BYTES)

    payload = enc.payload
    head = decode_sentinel_header(payload)
    header_locs = list(head.locations)
    security = set(header_locs)
    if head.sentinel is not None:
        for i in range(4, LINE_BYTES):
            if payload[i] & LOW6 == head.sentinel:
                security.add(i)

    data = bytearray(payload)
    for src, holder in _displacement(None, header_locs, security):
        data[src] = payload[holder]
    for i in security:
        data[i] = 0

    return CaliLine(bytes(data), tuple(i in security for i in range(LINE_BYTES)))


def encode_4B(line: CaliLine) -> ChunkedLine4B:
    """Convert to the bitvector-4B chunked format.

    Each califormed chunk's lowest-index security byte becomes the holder
    and is overwritten with the chunk's 8-bit security vector.  Security
    bytes are metadata holders, so their payload is canonicalized to zero;
    encodings therefore never depend on whatever data sat under them.
    """
    payload = bytearray(line.data)
    meta = []
    for c in range(CHUNKS_PER_LINE):
        base = c * CHUNK_BYTES
        vector = 0
        holder = -1
        for j in range(CHUNK_BYTES):
            if line.mask[base + j]:
                vector |= 1 << j
                payload[base + j] = 0
                if holder < 0:
                    holder = j
        if holder < 0:
            meta.append(ChunkMeta4B(False, 0))
        else:
            payload[base + holder] = vector
            meta.append(ChunkMeta4B(True, holder))
    return ChunkedLine4B(bytes(payload), tuple(meta))


def decode_4B(cl: ChunkedLine4B) -> CaliLine:
    data = bytearray(cl.payload)
    mask = [False] * LINE_BYTES
    for c, (califormed, holder) in enumerate(cl.chunk_meta):
        if not califormed:
            continue
        base = c * CHUNK_BYTES
        vector = cl.payload[base + holder]
        if not (vector >> holder) & 1:
            raise CodecError(
                f"chunk {c}: holder byte {holder} is not marked as a security byte"
            )
        for j in range(CHUNK_BYTES):
            if (vector >> j) & 1:
                mask[base + j] = True
                data[base + j] = 0
    return CaliLine(bytes(data), tuple(mask))


def encode_1B(line: CaliLine) -> ChunkedLine1B:
    """Convert to the bitvector-1B chunked format.

    The security vector always lands in chunk byte 0; a displaced normal
    byte 0 is parked in the chunk's last security byte.
    """
    payload = bytearray(line.data)
    meta = []
    for c in range(CHUNKS_PER_LINE):
        base = c * CHUNK_BYTES
        vector = 0
        last = -1
        for j in range(CHUNK_BYTES):
            if line.mask[base + j]:
                vector |= 1 << j
                payload[base + j] = 0  # canonical security-byte content
                last = j
        if last < 0:
            meta.append(False)
            continue
        if not vector & 1:
            payload[base + last] = line.data[base]
        payload[base] = vector
        meta.append(True)
    return ChunkedLine1B(bytes(payload), tuple(meta))


def decode_1B(cl: ChunkedLine1B) -> CaliLine:
    data = bytearray(cl.payload)
    mask = [False] * LINE_BYTES
    for c, califormed in enumerate(cl.chunk_meta):
        if not califormed:
            continue
        base = c * CHUNK_BYTES
        vector = cl.payload[base]
        if vector == 0:
            raise CodecError(
                f"chunk {c}: marked califormed but its bit vector is empty"
            )
        if not vector & 1:
            last = vector.bit_length() - 1
            data[base] = cl.payload[base + last]
        for j in range(CHUNK_BYTES):
            if (vector >> j) & 1:
                mask[base + j] = True
                data[base + j] = 0
    return CaliLine(bytes(data), tuple(mask))
