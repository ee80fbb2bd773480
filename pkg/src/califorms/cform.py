"""CFORM instruction semantics and the privileged exception model.

A CFORM request targets one 64-byte line and carries two 64-bit operands:
``set_bits`` selects the desired state per byte (1 = security, 0 = regular)
and ``change_mask`` gates which bytes may change at all.  Redundant
transitions are faults: setting an existing security byte raises IllegalSet,
unsetting a regular byte raises IllegalUnset.  Those two metadata faults are
never suppressible; access faults (load/store/LSQ/temporal) can be masked by
the whitelist window used around memcpy-style routines.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .cacheline import LINE_BYTES, CaliLine

FULL_LINE_MASK = (1 << LINE_BYTES) - 1


class FaultKind(enum.Enum):
    ILLEGAL_SET = "IllegalSet"
    ILLEGAL_UNSET = "IllegalUnset"
    LOAD_VIOLATION = "LoadViolation"
    STORE_VIOLATION = "StoreViolation"
    LSQ_VIOLATION = "LsqViolation"
    TEMPORAL_VIOLATION = "TemporalViolation"


#: Fault kinds that the whitelist window may suppress or a heap model may
#: reclassify.  Metadata tampering (IllegalSet/IllegalUnset) is excluded.
ACCESS_FAULTS = frozenset(
    {FaultKind.LOAD_VIOLATION, FaultKind.STORE_VIOLATION}
)


class CaliformsException(Exception):
    """Privileged fault raised or logged by the simulator.

    ``addr`` is the faulting byte address; ``op_index`` is stamped by the
    trace runner when the fault occurs inside a trace.
    """

    def __init__(self, kind: FaultKind, addr: int, detail: str = "") -> None:
        super().__init__(f"{kind.value} at {addr:#x}" + (f": {detail}" if detail else ""))
        self.kind = kind
        self.addr = addr
        self.detail = detail
        self.op_index: int | None = None


@dataclass(frozen=True)
class CformRequest:
    """One line-granular (un)set request: address plus R2/R3 bit vectors."""

    addr: int
    set_bits: int
    change_mask: int

    def __post_init__(self) -> None:
        if self.addr % LINE_BYTES:
            raise ValueError(f"address {self.addr:#x} is not 64-byte aligned")
        for name in ("set_bits", "change_mask"):
            v = getattr(self, name)
            if not 0 <= v <= FULL_LINE_MASK:
                raise ValueError(f"{name} must be a 64-bit vector, got {v:#x}")


def apply_cform(line: CaliLine, req: CformRequest) -> CaliLine:
    """Apply one CFORM request to a line.

    Per byte: no change when the mask bit is clear; otherwise
    regular -> security (data forced to 0x00) when the set bit is 1, and
    security -> regular (data 0x00) when it is 0.  A redundant transition
    raises at the lowest offending byte and, because the input line is never
    mutated, the whole request is atomic: callers keep the original line on
    failure.
    """
    data = bytearray(line.data)
    mask = list(line.mask)
    change = req.change_mask
    wanted = req.set_bits
    for i in range(LINE_BYTES):
        if not (change >> i) & 1:
            continue
        if (wanted >> i) & 1:
            if mask[i]:
                raise CaliformsException(
                    FaultKind.ILLEGAL_SET, req.addr + i,
                    "set of an existing security byte",
                )
            mask[i] = True
        else:
            if not mask[i]:
                raise CaliformsException(
                    FaultKind.ILLEGAL_UNSET, req.addr + i,
                    "unset of a regular byte",
                )
            mask[i] = False
        data[i] = 0
    return CaliLine(bytes(data), tuple(mask))


class ExceptionMask:
    """Whitelist window state: a nesting depth counter.

    Access faults are suppressed while the depth is positive, so wrapped
    library calls compose.  Exiting with no matching enter is an error.
    """

    def __init__(self) -> None:
        self.depth = 0

    @property
    def suppress(self) -> bool:
        return self.depth > 0

    def enter(self) -> None:
        self.depth += 1

    def exit(self) -> None:
        if self.depth == 0:
            raise ValueError("whitelist exit without a matching enter")
        self.depth -= 1
