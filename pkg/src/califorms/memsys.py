"""Functional model of a califorms-aware memory hierarchy.

The model is untimed: it tracks architectural state (line contents, security
masks, whitelist depth, fault log) and event counters, not cycles.  Lines
live in exactly one level at a time:

* L1 holds bitvector lines (:class:`~califorms.cacheline.CaliLine`),
  direct-mapped with spill-on-conflict;
* L2 holds sentinel lines (:class:`~califorms.cacheline.EncodedLine`),
  also direct-mapped, demoting to memory on conflict;
* memory holds sentinel payloads plus a one-bit-per-line side map standing
  in for the spare ECC bit.

Loads read security bytes as zero, always.  Unsuppressed accesses that touch
a security byte log exactly one fault; CFORM metadata faults are never
suppressed.  Accesses are width-aligned (1/2/4/8 bytes) and may not cross a
line boundary; values are little-endian.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .cacheline import (
    LINE_BYTES,
    CaliLine,
    EncodedLine,
    decode_sentinel,
    encode_sentinel,
)
from .cform import (
    ACCESS_FAULTS,
    CaliformsException,
    CformRequest,
    ExceptionMask,
    FaultKind,
    apply_cform,
)

PAGE_BYTES = 4096
LINES_PER_PAGE = PAGE_BYTES // LINE_BYTES
_ZERO_LINE = bytes(LINE_BYTES)
_WIDTHS = (1, 2, 4, 8)


@lru_cache(maxsize=256)
def _validate_encoding(payload: bytes, califormed: bool) -> None:
    decode_sentinel(EncodedLine(payload, califormed))


@dataclass
class Counters:
    loads: int = 0
    stores: int = 0
    cforms: int = 0
    fills: int = 0
    spills: int = 0
    exceptions: int = 0
    suppressed: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "loads": self.loads,
            "stores": self.stores,
            "cforms": self.cforms,
            "fills": self.fills,
            "spills": self.spills,
            "exceptions": self.exceptions,
            "suppressed": self.suppressed,
        }


@dataclass(frozen=True)
class LsqOp:
    """One in-flight memory operation for the load/store queue model."""

    kind: str  # "load" | "store" | "cform"
    addr: int
    width: int = 1
    value: int = 0
    set_bits: int = 0
    change_mask: int = 0

    @classmethod
    def load(cls, addr: int, width: int = 1) -> LsqOp:
        return cls("load", addr, width)

    @classmethod
    def store(cls, addr: int, width: int, value: int) -> LsqOp:
        return cls("store", addr, width, value)

    @classmethod
    def cform(cls, req: CformRequest) -> LsqOp:
        return cls("cform", req.addr, set_bits=req.set_bits, change_mask=req.change_mask)

    @property
    def byte_mask(self) -> int:
        if self.kind == "cform":
            return self.change_mask
        return ((1 << self.width) - 1) << (self.addr % LINE_BYTES)

    @property
    def line_addr(self) -> int:
        return self.addr - self.addr % LINE_BYTES


@dataclass
class LsqResult:
    index: int
    kind: str
    value: int | None = None
    violation: FaultKind | None = None


class MachineState:
    """One simulated machine instance.

    All operations on an instance are serialized; distinct instances are
    independent and may run in parallel threads.
    """

    def __init__(self, l1_lines: int = 512, l2_lines: int = 4096) -> None:
        if l1_lines < 1 or l2_lines < 1:
            raise ValueError("cache sizes must be at least one line")
        self.l1_lines = l1_lines
        self.l2_lines = l2_lines
        self.l1: dict[int, CaliLine] = {}
        self.l2: dict[int, EncodedLine] = {}
        self._l1_slot: dict[int, int] = {}
        self._l2_slot: dict[int, int] = {}
        # line address -> (sentinel payload, califormed side bit)
        self.memory: dict[int, tuple[bytes, bool]] = {}
        # page address -> 8-byte per-line califormed bit map (OS-reserved space)
        self.swap_meta: dict[int, bytes] = {}
        self.mask_state = ExceptionMask()
        self.exception_log: list[CaliformsException] = []
        self.counters = Counters()
        # Optional hook (addr, kind) -> kind letting a heap model reclassify
        # access faults, e.g. into TemporalViolation for quarantined regions.
        self.fault_classifier = None
        self.op_index: int | None = None

    # -- whitelist window ---------------------------------------------------

    def whitelist_enter(self) -> None:
        self.mask_state.enter()

    def whitelist_exit(self) -> None:
        self.mask_state.exit()

    # -- fault logging ------------------------------------------------------

    def _log(self, kind: FaultKind, addr: int, detail: str) -> CaliformsException:
        if self.fault_classifier is not None and kind in ACCESS_FAULTS:
            kind = self.fault_classifier(addr, kind)
        exc = CaliformsException(kind, addr, detail)
        exc.op_index = self.op_index
        self.exception_log.append(exc)
        self.counters.exceptions += 1
        return exc

    # -- hierarchy movement -------------------------------------------------

    def _check_line_addr(self, line_addr: int) -> None:
        if line_addr % LINE_BYTES:
            raise ValueError(f"address {line_addr:#x} is not line-aligned")

    def fill(self, line_addr: int) -> CaliLine:
        """Bring a line into L1, decoding from L2 or memory.

        A decode failure means the stored metadata is corrupt and surfaces
        as a :class:`~califorms.cacheline.CodecError` simulator fault.
        """
        self._check_line_addr(line_addr)
        if line_addr in self.l1:
            raise ValueError(f"line {line_addr:#x} already resident in L1")
        slot = (line_addr // LINE_BYTES) % self.l1_lines
        occupant = self._l1_slot.get(slot)
        if occupant is not None:
            self.spill(occupant)
        enc = self._l2_pop(line_addr)
        if enc is None:
            payload, bit = self.memory.pop(line_addr, (_ZERO_LINE, False))
            enc = EncodedLine(payload, bit)
        line = decode_sentinel(enc)
        self.l1[line_addr] = line
        self._l1_slot[slot] = line_addr
        self.counters.fills += 1
        return line

    def spill(self, line_addr: int) -> None:
        """Evict a line from L1 into L2, converting to sentinel format."""
        self._check_line_addr(line_addr)
        line = self.l1.pop(line_addr, None)
        if line is None:
            raise ValueError(f"line {line_addr:#x} not resident in L1")
        del self._l1_slot[(line_addr // LINE_BYTES) % self.l1_lines]
        self._l2_insert(line_addr, encode_sentinel(line))
        self.counters.spills += 1

    def flush(self) -> None:
        """Spill every resident L1 line."""
        for line_addr in sorted(self.l1):
            self.spill(line_addr)

    def _l2_pop(self, line_addr: int) -> EncodedLine | None:
        enc = self.l2.pop(line_addr, None)
        if enc is not None:
            del self._l2_slot[(line_addr // LINE_BYTES) % self.l2_lines]
        return enc

    def _l2_insert(self, line_addr: int, enc: EncodedLine) -> None:
        slot = (line_addr // LINE_BYTES) % self.l2_lines
        occupant = self._l2_slot.get(slot)
        if occupant is not None and occupant != line_addr:
            old = self.l2.pop(occupant)
            self.memory[occupant] = (old.payload, old.califormed)
        self.l2[line_addr] = enc
        self._l2_slot[slot] = line_addr

    def _resident(self, line_addr: int) -> CaliLine:
        line = self.l1.get(line_addr)
        if line is None:
            line = self.fill(line_addr)
        return line

    def peek_line(self, line_addr: int) -> CaliLine:
        """Observe a line wherever it lives, without moving or counting it."""
        self._check_line_addr(line_addr)
        if line_addr in self.l1:
            return self.l1[line_addr]
        if line_addr in self.l2:
            return decode_sentinel(self.l2[line_addr])
        payload, bit = self.memory.get(line_addr, (_ZERO_LINE, False))
        return decode_sentinel(EncodedLine(payload, bit))

    def preset_line(self, line_addr: int, payload: bytes, califormed: bool) -> None:
        """Install backing-store content directly (environment bootstrap).

        Bypasses caches and counters; refuses to shadow a resident line.
        """
        self._check_line_addr(line_addr)
        if line_addr in self.l1 or line_addr in self.l2:
            raise ValueError(f"line {line_addr:#x} is cache-resident")
        _validate_encoding(bytes(payload), bool(califormed))  # reject corrupt content
        self.memory[line_addr] = (bytes(payload), bool(califormed))

    # -- architectural accesses ----------------------------------------------

    def _check_access(self, addr: int, width: int) -> None:
        if width not in _WIDTHS:
            raise ValueError(f"width must be one of {_WIDTHS}, got {width}")
        if addr % width:
            raise ValueError(f"address {addr:#x} is not {width}-byte aligned")
        if addr // LINE_BYTES != (addr + width - 1) // LINE_BYTES:
            raise ValueError(f"access at {addr:#x} crosses a line boundary")

    def load(self, addr: int, width: int) -> tuple[int, CaliformsException | None]:
        """Read ``width`` bytes; security bytes read as zero.

        Returns the value and the logged fault, if any.  The value is
        returned even on a fault, modeling report-at-commit.
        """
        self._check_access(addr, width)
        line = self._resident(addr - addr % LINE_BYTES)
        self.counters.loads += 1
        offset = addr % LINE_BYTES
        value = 0
        fault_addr = None
        for j in range(width):
            i = offset + j
            if line.mask[i]:
                if fault_addr is None:
                    fault_addr = addr + j
            else:
                value |= line.data[i] << (8 * j)
        exc = None
        if fault_addr is not None:
            if self.mask_state.suppress:
                self.counters.suppressed += 1
            else:
                exc = self._log(
                    FaultKind.LOAD_VIOLATION, fault_addr,
                    f"{width}-byte load touched a security byte",
                )
        return value, exc

    def store(self, addr: int, width: int, value: int) -> CaliformsException | None:
        """Write ``width`` bytes.

        An unsuppressed store that touches a security byte is squashed and
        logged.  A whitelisted store writes the regular bytes only, leaving
        security bytes (data and mask) untouched.
        """
        self._check_access(addr, width)
        if not 0 <= value < 1 << (8 * width):
            raise ValueError(f"value {value:#x} does not fit in {width} bytes")
        line = self._resident(addr - addr % LINE_BYTES)
        self.counters.stores += 1
        offset = addr % LINE_BYTES
        fault_addr = None
        for j in range(width):
            if line.mask[offset + j]:
                fault_addr = addr + j
                break
        if fault_addr is not None and not self.mask_state.suppress:
            return self._log(
                FaultKind.STORE_VIOLATION, fault_addr,
                f"{width}-byte store touched a security byte",
            )
        if fault_addr is not None:
            self.counters.suppressed += 1
        data = bytearray(line.data)
        for j in range(width):
            i = offset + j
            if not line.mask[i]:
                data[i] = (value >> (8 * j)) & 0xFF
        self.l1[addr - addr % LINE_BYTES] = CaliLine(bytes(data), line.mask)
        return None

    def cform_at(self, req: CformRequest) -> CaliformsException | None:
        """Fetch the target line into L1 (store-like) and apply the request.

        Metadata faults leave the line untouched and are logged regardless
        of the whitelist window.
        """
        line = self._resident(req.addr)
        self.counters.cforms += 1
        try:
            updated = apply_cform(line, req)
        except CaliformsException as exc:
            return self._log(exc.kind, exc.addr, exc.detail)
        self.l1[req.addr] = updated
        return None

    # -- load/store queue ----------------------------------------------------

    def lsq_execute(self, ops: list[LsqOp]) -> list[LsqResult]:
        """Run a window of in-flight ops in program order.

        A load or store whose bytes overlap an older in-flight CFORM's
        change mask never receives a forwarded value: the load reads zero
        for those bytes and both are marked LsqViolation.  Ordinary
        store-to-load forwarding is value-transparent in a functional model,
        so it falls out of in-order commit.
        """
        results: list[LsqResult] = []
        for idx, op in enumerate(ops):
            if op.kind == "cform":
                req = CformRequest(op.addr, op.set_bits, op.change_mask)
                exc = self.cform_at(req)
                results.append(LsqResult(idx, "cform", None, exc.kind if exc else None))
                continue
            if op.kind not in ("load", "store"):
                raise ValueError(f"unknown LSQ op kind {op.kind!r}")
            shadowed = any(
                older.kind == "cform"
                and older.line_addr == op.line_addr
                and older.change_mask & op.byte_mask
                for older in ops[:idx]
            )
            if shadowed:
                exc = self._log(
                    FaultKind.LSQ_VIOLATION, op.addr,
                    f"{op.kind} overlaps an in-flight CFORM",
                )
                if op.kind == "load":
                    value = self._read_masked(op, ops[:idx])
                    self.counters.loads += 1
                    results.append(LsqResult(idx, "load", value, exc.kind))
                else:
                    self.counters.stores += 1
                    results.append(LsqResult(idx, "store", None, exc.kind))
                continue
            if op.kind == "load":
                value, exc = self.load(op.addr, op.width)
                results.append(LsqResult(idx, "load", value, exc.kind if exc else None))
            else:
                exc = self.store(op.addr, op.width, op.value)
                results.append(LsqResult(idx, "store", None, exc.kind if exc else None))
        return results

    def _read_masked(self, op: LsqOp, older: list[LsqOp]) -> int:
        """Value for a CFORM-shadowed load: zero at shadowed or security
        bytes, architectural data elsewhere."""
        line = self._resident(op.line_addr)
        shadow = 0
        for o in older:
            if o.kind == "cform" and o.line_addr == op.line_addr:
                shadow |= o.change_mask
        offset = op.addr % LINE_BYTES
        value = 0
        for j in range(op.width):
            i = offset + j
            if not line.mask[i] and not (shadow >> i) & 1:
                value |= line.data[i] << (8 * j)
        return value

    # -- page swap ------------------------------------------------------------

    def page_swap_out(self, page_addr: int) -> tuple[bytes, bytes]:
        """Extract a page image: 4096 califormed data bytes plus the 8-byte
        per-line metadata map, recorded in the OS-reserved swap area."""
        if page_addr % PAGE_BYTES:
            raise ValueError(f"address {page_addr:#x} is not page-aligned")
        line_addrs = [page_addr + j * LINE_BYTES for j in range(LINES_PER_PAGE)]
        for a in line_addrs:
            if a in self.l1:
                self.spill(a)
        for a in line_addrs:
            enc = self._l2_pop(a)
            if enc is not None:
                self.memory[a] = (enc.payload, enc.califormed)
        data = bytearray(PAGE_BYTES)
        bits = 0
        for j, a in enumerate(line_addrs):
            payload, bit = self.memory.pop(a, (_ZERO_LINE, False))
            data[j * LINE_BYTES:(j + 1) * LINE_BYTES] = payload
            if bit:
                bits |= 1 << j
        meta = bits.to_bytes(8, "little")
        self.swap_meta[page_addr] = meta
        return bytes(data), meta

    def page_swap_in(self, page_addr: int, data: bytes, meta: bytes) -> None:
        """Restore a page image produced by :meth:`page_swap_out`."""
        if page_addr % PAGE_BYTES:
            raise ValueError(f"address {page_addr:#x} is not page-aligned")
        if len(data) != PAGE_BYTES:
            raise ValueError(f"page image must be {PAGE_BYTES} bytes, got {len(data)}")
        if len(meta) != 8:
            raise ValueError(f"page metadata must be 8 bytes, got {len(meta)}")
        bits = int.from_bytes(meta, "little")
        for j in range(LINES_PER_PAGE):
            a = page_addr + j * LINE_BYTES
            if a in self.l1 or a in self.l2:
                raise ValueError(f"line {a:#x} is cache-resident; page not swapped out")
        for j in range(LINES_PER_PAGE):
            a = page_addr + j * LINE_BYTES
            payload = bytes(data[j * LINE_BYTES:(j + 1) * LINE_BYTES])
            bit = bool((bits >> j) & 1)
            if bit or payload != _ZERO_LINE:
                self.memory[a] = (payload, bit)
            else:
                self.memory.pop(a, None)
        self.swap_meta.pop(page_addr, None)
