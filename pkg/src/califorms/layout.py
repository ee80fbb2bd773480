"""Struct layout engine: alignment, density, and security-byte insertion.

Layouts follow the usual C rules under an LP64 type table: each field sits
at the next offset rounded up to its alignment and the struct is padded to a
multiple of its largest alignment.  Density is the ratio of field bytes to
total bytes; whatever is left over is harvestable padding.

Three insertion policies turn a layout into a califormed layout:

* ``opportunistic`` reuses the existing padding spans as security bytes and
  adds zero bytes of overhead;
* ``full`` separates every adjacent field pair (and the struct's two ends)
  with a random-length security span;
* ``intelligent`` surrounds only arrays and (function) pointers, with
  adjacent protected fields sharing a single span.

Random span lengths are drawn uniformly from [min_pad, max_pad] with
``random.Random(seed)`` (Mersenne Twister), in a fixed order: leading gap,
inter-field gaps ascending, trailing gap.  Identical inputs therefore yield
identical layouts.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .cacheline import LINE_BYTES
from .cform import CformRequest


class LayoutError(ValueError):
    """A field list or policy request that cannot be laid out."""


class FieldKind(enum.Enum):
    SCALAR = "scalar"
    ARRAY = "array"
    POINTER = "pointer"
    FUNCTION_POINTER = "function_pointer"


#: LP64 scalar sizes/alignments (pointers handled via FieldKind).
LP64_TYPES: dict[str, tuple[int, int]] = {
    "bool": (1, 1),
    "char": (1, 1),
    "signed char": (1, 1),
    "unsigned char": (1, 1),
    "short": (2, 2),
    "unsigned short": (2, 2),
    "int": (4, 4),
    "unsigned int": (4, 4),
    "long": (8, 8),
    "unsigned long": (8, 8),
    "long long": (8, 8),
    "unsigned long long": (8, 8),
    "size_t": (8, 8),
    "float": (4, 4),
    "double": (8, 8),
}

POINTER_SIZE = 8
POINTER_ALIGN = 8


@dataclass(frozen=True)
class FieldDef:
    """One struct field: a scalar, an array, or a (function) pointer."""

    name: str
    kind: FieldKind
    size: int
    alignment: int
    element_type: str | None = None  # scalar type of array elements, if known
    count: int | None = None         # array element count

    def __post_init__(self) -> None:
        if self.size < 1:
            raise LayoutError(f"field {self.name!r} has zero size")
        if self.alignment < 1 or self.alignment & (self.alignment - 1):
            raise LayoutError(
                f"field {self.name!r} alignment {self.alignment} is not a power of two"
            )
        if self.kind is FieldKind.ARRAY:
            if not self.count or self.count < 1:
                raise LayoutError(f"array field {self.name!r} needs a positive count")
            if self.size % self.count:
                raise LayoutError(
                    f"array field {self.name!r}: size {self.size} is not "
                    f"count {self.count} x element size"
                )

    @classmethod
    def scalar(cls, name: str, type_name: str) -> FieldDef:
        size, align = _scalar_info(type_name)
        return cls(name, FieldKind.SCALAR, size, align)

    @classmethod
    def array(cls, name: str, element_type: str, count: int) -> FieldDef:
        size, align = _scalar_info(element_type)
        return cls(name, FieldKind.ARRAY, size * count, align,
                   element_type=element_type, count=count)

    @classmethod
    def pointer(cls, name: str) -> FieldDef:
        return cls(name, FieldKind.POINTER, POINTER_SIZE, POINTER_ALIGN)

    @classmethod
    def function_pointer(cls, name: str) -> FieldDef:
        return cls(name, FieldKind.FUNCTION_POINTER, POINTER_SIZE, POINTER_ALIGN)

    @property
    def protected(self) -> bool:
        """Whether the intelligent policy guards this field."""
        return self.kind is not FieldKind.SCALAR


def _scalar_info(type_name: str) -> tuple[int, int]:
    key = " ".join(type_name.split())
    try:
        return LP64_TYPES[key]
    except KeyError:
        raise LayoutError(f"unknown scalar type {type_name!r}") from None


def _align_up(value: int, align: int) -> int:
    return (value + align - 1) & -align


Span = tuple[int, int]  # (offset, length)


@dataclass(frozen=True)
class StructLayout:
    """A computed layout: field offsets, padding spans, total size."""

    name: str
    fields: tuple[FieldDef, ...]
    offsets: tuple[int, ...]
    padding_spans: tuple[Span, ...]
    total_size: int

    @property
    def field_bytes(self) -> int:
        return sum(f.size for f in self.fields)

    @property
    def density(self) -> float:
        return self.field_bytes / self.total_size

    @property
    def has_padding(self) -> bool:
        return bool(self.padding_spans)

    @property
    def max_alignment(self) -> int:
        return max(f.alignment for f in self.fields)


def compute_layout(fields: Sequence[FieldDef], name: str = "") -> StructLayout:
    """Lay out fields with C alignment rules and record the padding."""
    if not fields:
        raise LayoutError("cannot lay out a struct with no fields")
    offsets: list[int] = []
    spans: list[Span] = []
    cursor = 0
    for f in fields:
        offset = _align_up(cursor, f.alignment)
        if offset > cursor:
            spans.append((cursor, offset - cursor))
        offsets.append(offset)
        cursor = offset + f.size
    total = _align_up(cursor, max(f.alignment for f in fields))
    if total > cursor:
        spans.append((cursor, total - cursor))
    return StructLayout(name, tuple(fields), tuple(offsets), tuple(spans), total)


class Policy(enum.Enum):
    OPPORTUNISTIC = "opportunistic"
    FULL = "full"
    INTELLIGENT = "intelligent"

    @classmethod
    def from_string(cls, text: str) -> Policy:
        try:
            return cls(text.lower())
        except ValueError:
            names = ", ".join(p.value for p in cls)
            raise LayoutError(f"unknown policy {text!r} (expected one of {names})") from None


@dataclass(frozen=True)
class CaliformedLayout:
    """A layout plus the security-byte spans a policy inserted.

    ``field_offsets`` and ``total_size`` describe the (possibly widened)
    califormed object; ``base`` keeps the original geometry.
    ``padding_spans`` is whatever alignment padding remains non-security.
    """

    base: StructLayout
    policy: Policy
    seed: int
    min_pad: int
    max_pad: int
    field_offsets: tuple[int, ...]
    security_spans: tuple[Span, ...]
    padding_spans: tuple[Span, ...]
    total_size: int

    def __post_init__(self) -> None:
        covered = set()
        for off, length in self.security_spans:
            if off < 0 or length < 1 or off + length > self.total_size:
                raise LayoutError(f"security span ({off}, {length}) out of bounds")
            covered.update(range(off, off + length))
        for f, off in zip(self.base.fields, self.field_offsets):
            if covered & set(range(off, off + f.size)):
                raise LayoutError(f"security span overlaps field {f.name!r}")

    @property
    def overhead(self) -> int:
        return self.total_size - self.base.total_size

    @property
    def security_bytes(self) -> int:
        return sum(length for _, length in self.security_spans)

    def security_offsets(self) -> frozenset[int]:
        return frozenset(
            off + j for off, length in self.security_spans for j in range(length)
        )


def caliform_layout(layout: StructLayout, policy: Policy, seed: int = 0,
                    min_pad: int = 1, max_pad: int = 7) -> CaliformedLayout:
    """Apply an insertion policy, re-laying fields out around the new spans.

    Where an inserted span and an alignment requirement overlap they merge:
    the whole resulting gap becomes security bytes, never less than the
    drawn span length.
    """
    if min_pad < 1 or min_pad > max_pad:
        raise LayoutError(f"need 1 <= min_pad <= max_pad, got [{min_pad}, {max_pad}]")
    if policy is Policy.OPPORTUNISTIC:
        return CaliformedLayout(
            base=layout, policy=policy, seed=seed, min_pad=min_pad, max_pad=max_pad,
            field_offsets=layout.offsets, security_spans=layout.padding_spans,
            padding_spans=(), total_size=layout.total_size,
        )

    rng = random.Random(seed)
    if policy is Policy.FULL:
        guarded = [True] * (len(layout.fields) + 1)
    elif policy is Policy.INTELLIGENT:
        # Gap i sits before field i; the final entry is the trailing gap.
        # A gap is guarded when either neighbouring field is protected, so
        # adjacent protected fields naturally share one span.
        guarded = [layout.fields[0].protected]
        for prev, cur in zip(layout.fields, layout.fields[1:]):
            guarded.append(prev.protected or cur.protected)
        guarded.append(layout.fields[-1].protected)
    else:
        raise LayoutError(f"unsupported policy {policy}")

    offsets: list[int] = []
    security: list[Span] = []
    padding: list[Span] = []
    cursor = 0
    for i, f in enumerate(layout.fields):
        want = rng.randint(min_pad, max_pad) if guarded[i] else 0
        offset = _align_up(cursor + want, f.alignment)
        gap = offset - cursor
        if guarded[i]:
            security.append((cursor, gap))
        elif gap:
            padding.append((cursor, gap))
        offsets.append(offset)
        cursor = offset + f.size
    want = rng.randint(min_pad, max_pad) if guarded[-1] else 0
    total = _align_up(cursor + want, layout.max_alignment)
    if guarded[-1]:
        security.append((cursor, total - cursor))
    elif total > cursor:
        padding.append((cursor, total - cursor))

    return CaliformedLayout(
        base=layout, policy=policy, seed=seed, min_pad=min_pad, max_pad=max_pad,
        field_offsets=tuple(offsets), security_spans=tuple(security),
        padding_spans=tuple(padding), total_size=total,
    )


def density_histogram(layouts: Iterable[StructLayout], bins: int) -> dict:
    """Bin struct densities over (0, 1] and report the padded fraction."""
    if bins < 1:
        raise LayoutError("need at least one bin")
    counts = [0] * bins
    padded = 0
    n = 0
    for layout in layouts:
        n += 1
        idx = min(int(layout.density * bins), bins - 1)
        counts[idx] += 1
        if layout.has_padding:
            padded += 1
    return {
        "bins": bins,
        "edges": [i / bins for i in range(bins + 1)],
        "counts": counts,
        "structs": n,
        "fraction_with_padding": (padded / n) if n else 0.0,
    }


def emit_cform_plan(cl: CaliformedLayout, base_addr: int) -> list[CformRequest]:
    """Translate security spans at ``base_addr`` into per-line set requests.

    One request covers all security bytes of a touched line, so a span that
    crosses a line boundary costs exactly two requests.
    """
    if base_addr % LINE_BYTES:
        raise LayoutError(f"base address {base_addr:#x} is not line-aligned")
    per_line: dict[int, int] = {}
    for off, length in cl.security_spans:
        for j in range(off, off + length):
            addr = base_addr + j
            line = addr - addr % LINE_BYTES
            per_line[line] = per_line.get(line, 0) | (1 << (addr % LINE_BYTES))
    return [
        CformRequest(line, bits, bits) for line, bits in sorted(per_line.items())
    ]
