"""Heap and stack models that drive CFORM plans against a machine.

The heap is clean-before-use: every free or quarantined byte stays a
security byte holding 0x00.  ``alloc`` carves a line-aligned, line-rounded
region and unsets exactly the field-data bytes of the object's califormed
layout, leaving its security spans (and any rounding slack past the object,
which acts as an inter-object guard) set.  ``free`` sets the complementary
mask, returning the region to all-security/all-zero, and parks it in a FIFO
quarantine; regions re-enter the free pool head-first only once the
quarantined-byte watermark reaches the configured threshold.  Because the
alloc and free masks are exact complements, correct operation never raises
IllegalSet or IllegalUnset.

The stack is dirty-before-use: frames start as plain regular memory,
``enter`` sets the spans of the frame's objects, and ``exit`` unsets them
and zeroes the frame with ordinary stores before the region is reused.

While a heap is attached to a machine it reclassifies access faults inside
quarantined regions as TemporalViolation, which is how use-after-free shows
up in a trace.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .cacheline import LINE_BYTES, CaliLine, encode_sentinel
from .cform import CformRequest, FaultKind
from .layout import CaliformedLayout, emit_cform_plan
from .memsys import MachineState

DEFAULT_HEAP_BASE = 0x10_0000
DEFAULT_HEAP_SIZE = 1 << 20
DEFAULT_STACK_BASE = 0x80_0000
DEFAULT_STACK_SIZE = 1 << 20
DEFAULT_QUARANTINE_THRESHOLD = 256 * 1024

_ALL_SECURITY = encode_sentinel(
    CaliLine(bytes(LINE_BYTES), (True,) * LINE_BYTES)
)


class AllocationError(RuntimeError):
    """Heap or stack misuse: exhaustion, double free, unbalanced exit."""


def _round_lines(size: int) -> int:
    return -(-size // LINE_BYTES) * LINE_BYTES


def _data_bit_plan(layout: CaliformedLayout, base: int) -> list[tuple[int, int]]:
    """Per-line bit vectors covering the object's non-security bytes.

    These are the bytes alloc unsets and free re-sets; rounding slack past
    ``layout.total_size`` is excluded so it stays a security guard.
    """
    security = layout.security_offsets()
    per_line: dict[int, int] = {}
    for off in range(layout.total_size):
        if off in security:
            continue
        addr = base + off
        line = addr - addr % LINE_BYTES
        per_line[line] = per_line.get(line, 0) | (1 << (addr % LINE_BYTES))
    return sorted(per_line.items())


@dataclass
class Allocation:
    alloc_id: object
    base: int
    size: int  # line-rounded
    layout: CaliformedLayout


class Heap:
    """Clean-before-use heap bound to one machine."""

    def __init__(self, machine: MachineState, base: int = DEFAULT_HEAP_BASE,
                 size: int = DEFAULT_HEAP_SIZE,
                 quarantine_threshold: int = DEFAULT_QUARANTINE_THRESHOLD) -> None:
        if base % LINE_BYTES or size % LINE_BYTES or size <= 0:
            raise ValueError("heap region must be line-aligned and line-sized")
        self.machine = machine
        self.base = base
        self.size = size
        self.quarantine_threshold = quarantine_threshold
        self.free_regions: list[tuple[int, int]] = [(base, size)]
        self.live: dict[object, Allocation] = {}
        self.quarantine: deque[tuple[int, int]] = deque()
        self.quarantine_bytes = 0
        self.consumed_bytes = 0
        self._next_id = 1
        for line in range(base, base + size, LINE_BYTES):
            machine.preset_line(line, _ALL_SECURITY.payload, True)
        machine.fault_classifier = self._classify

    # -- fault reclassification ------------------------------------------------

    def _classify(self, addr: int, kind: FaultKind) -> FaultKind:
        if self._in_quarantine(addr):
            return FaultKind.TEMPORAL_VIOLATION
        return kind

    def _in_quarantine(self, addr: int) -> bool:
        return any(b <= addr < b + s for b, s in self.quarantine)

    # -- allocation --------------------------------------------------------------

    def alloc(self, layout: CaliformedLayout, alloc_id: object = None) -> Allocation:
        """Carve a region and clear the layout's data bytes (CFORM unset)."""
        size = _round_lines(layout.total_size)
        for idx, (rbase, rsize) in enumerate(self.free_regions):
            if rsize >= size:
                remainder = rsize - size
                if remainder:
                    self.free_regions[idx] = (rbase + size, remainder)
                else:
                    del self.free_regions[idx]
                base = rbase
                break
        else:
            raise AllocationError(f"out of memory for a {size}-byte allocation")

        if alloc_id is None:
            alloc_id = self._next_id
            self._next_id += 1
        elif alloc_id in self.live:
            raise AllocationError(f"allocation id {alloc_id!r} already live")

        for line, bits in _data_bit_plan(layout, base):
            self.machine.cform_at(CformRequest(line, 0, bits))
        alloc = Allocation(alloc_id, base, size, layout)
        self.live[alloc_id] = alloc
        self.consumed_bytes += size
        return alloc

    def free(self, alloc_id: object, non_temporal: bool = False) -> None:
        """Re-caliform and zero the region, then quarantine it.

        ``non_temporal`` is accepted for trace compatibility (a deallocation
        hint instruction); it does not change functional behavior.
        """
        alloc = self.live.pop(alloc_id, None)
        if alloc is None:
            raise AllocationError(f"free of id {alloc_id!r} which is not live")
        for line, bits in _data_bit_plan(alloc.layout, alloc.base):
            self.machine.cform_at(CformRequest(line, bits, bits))
        self.quarantine.append((alloc.base, alloc.size))
        self.quarantine_bytes += alloc.size
        while self.quarantine_bytes >= self.quarantine_threshold:
            rbase, rsize = self.quarantine.popleft()
            self.quarantine_bytes -= rsize
            self._release(rbase, rsize)

    def _release(self, base: int, size: int) -> None:
        regions = self.free_regions
        lo = 0
        while lo < len(regions) and regions[lo][0] < base:
            lo += 1
        regions.insert(lo, (base, size))
        # coalesce with neighbours
        merged: list[tuple[int, int]] = []
        for rbase, rsize in regions:
            if merged and merged[-1][0] + merged[-1][1] == rbase:
                pbase, psize = merged[-1]
                merged[-1] = (pbase, psize + rsize)
            else:
                merged.append((rbase, rsize))
        self.free_regions = merged

    # -- reporting ---------------------------------------------------------------

    def stats(self) -> dict:
        return {
            "live_allocations": len(self.live),
            "live_bytes": sum(a.size for a in self.live.values()),
            "quarantined_bytes": self.quarantine_bytes,
            "free_bytes": sum(s for _, s in self.free_regions),
            "consumed_bytes": self.consumed_bytes,
        }


@dataclass
class _Frame:
    base: int
    size: int
    objects: list[tuple[int, CaliformedLayout]]


class Stack:
    """Dirty-before-use stack model with LIFO frames."""

    def __init__(self, machine: MachineState, base: int = DEFAULT_STACK_BASE,
                 size: int = DEFAULT_STACK_SIZE) -> None:
        if base % LINE_BYTES or size % LINE_BYTES or size <= 0:
            raise ValueError("stack region must be line-aligned and line-sized")
        self.machine = machine
        self.base = base
        self.size = size
        self.frames: list[_Frame] = []
        self._top = base

    def enter(self, layouts: list[CaliformedLayout]) -> list[int]:
        """Push a frame holding the given objects; returns their bases."""
        frame_base = self._top
        cursor = frame_base
        objects: list[tuple[int, CaliformedLayout]] = []
        for layout in layouts:
            objects.append((cursor, layout))
            cursor += _round_lines(layout.total_size)
        if cursor > self.base + self.size:
            raise AllocationError("stack exhausted")
        for obj_base, layout in objects:
            for req in emit_cform_plan(layout, obj_base):
                self.machine.cform_at(req)
        self.frames.append(_Frame(frame_base, cursor - frame_base, objects))
        self._top = cursor
        return [b for b, _ in objects]

    def exit(self) -> None:
        """Pop the top frame: unset its spans, then zero the whole frame."""
        if not self.frames:
            raise AllocationError("stack exit without a matching enter")
        frame = self.frames.pop()
        for obj_base, layout in frame.objects:
            for req in emit_cform_plan(layout, obj_base):
                self.machine.cform_at(CformRequest(req.addr, 0, req.change_mask))
        for addr in range(frame.base, frame.base + frame.size, 8):
            self.machine.store(addr, 8, 0)
        self._top = frame.base

    @property
    def depth(self) -> int:
        return len(self.frames)
