"""JSON-lines trace interpreter wiring the machine, heap and stack together.

One operation per line; addresses and 64-bit vectors are hex strings.
Supported verbs (full grammar in docs/trace-format.md):

    {"op": "load",  "addr": "0x100000", "width": 4}
    {"op": "store", "addr": "0x100000", "width": 4, "value": "0xdeadbeef"}
    {"op": "cform", "addr": "0x100000", "set": "0xe", "mask": "0xe"}
    {"op": "malloc", "id": "a", "type": "A", "policy": "full", "seed": 7,
     "min": 1, "max": 7}
    {"op": "malloc", "id": "b", "fields": [{"name": "c", "type": "char"}]}
    {"op": "free", "id": "a"}
    {"op": "whitelist_enter"}  {"op": "whitelist_exit"}  {"op": "flush"}

Malformed lines are trace errors (exit 1, line-numbered diagnostic); logged
security violations make the run exit 2.  ``strict`` stops at the first
violation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

from .allocator import (
    DEFAULT_HEAP_BASE,
    DEFAULT_HEAP_SIZE,
    DEFAULT_QUARANTINE_THRESHOLD,
    AllocationError,
    Heap,
    Stack,
)
from .cform import CformRequest, FULL_LINE_MASK
from .layout import FieldDef, LayoutError, Policy, caliform_layout, compute_layout
from .memsys import MachineState
STATS_VERSION = 1

EXIT_CLEAN = 0
EXIT_USAGE = 1
EXIT_VIOLATIONS = 2


class TraceError(ValueError):
    """A trace line that cannot be executed."""

    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"trace line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class TraceResult:
    stats: dict
    exit_code: int
    machine: MachineState
    heap: Heap
    stack: Stack
    op_results: list = field(default_factory=list)


def _parse_u64(raw, line_no: int, what: str) -> int:
    if isinstance(raw, int):
        value = raw
    elif isinstance(raw, str):
        try:
            value = int(raw, 16)
        except ValueError:
            raise TraceError(line_no, f"{what} {raw!r} is not a hex value") from None
    else:
        raise TraceError(line_no, f"{what} must be an int or hex string")
    if not 0 <= value <= FULL_LINE_MASK:
        raise TraceError(line_no, f"{what} {value:#x} does not fit in 64 bits")
    return value


def run_trace(lines: Iterable[str], *, structs=None, strict: bool = False,
              machine: MachineState | None = None,
              heap_base: int = DEFAULT_HEAP_BASE,
              heap_size: int = DEFAULT_HEAP_SIZE,
              quarantine_threshold: int = DEFAULT_QUARANTINE_THRESHOLD) -> TraceResult:
    machine = machine or MachineState()
    heap = Heap(machine, heap_base, heap_size, quarantine_threshold)
    stack = Stack(machine)
    structs = structs or {}
    op_results: list = []

    stopped = False
    for index, raw in enumerate(lines):
        text = raw.strip()
        if not text or text.startswith("#"):
            op_results.append(None)
            continue
        line_no = index + 1
        try:
            op = json.loads(text)
        except json.JSONDecodeError as e:
            raise TraceError(line_no, f"invalid JSON ({e.msg})") from None
        if not isinstance(op, dict) or "op" not in op:
            raise TraceError(line_no, 'each op needs an "op" field')
        machine.op_index = index
        try:
            op_results.append(_execute(op, machine, heap, stack, structs, line_no))
        except (ValueError, AllocationError) as e:
            if isinstance(e, TraceError):
                raise
            raise TraceError(line_no, str(e)) from None
        if strict and machine.exception_log:
            stopped = True
            break

    stats = build_stats(machine, heap, stopped=stopped)
    exit_code = EXIT_VIOLATIONS if machine.exception_log else EXIT_CLEAN
    return TraceResult(stats, exit_code, machine, heap, stack, op_results)


def _execute(op: dict, machine: MachineState, heap: Heap, stack: Stack,
             structs, line_no: int):
    verb = op["op"]
    if verb == "load":
        addr = _parse_u64(op.get("addr"), line_no, "addr")
        value, exc = machine.load(addr, int(op.get("width", 1)))
        return {"value": value, "violation": exc.kind.value if exc else None}
    if verb == "store":
        addr = _parse_u64(op.get("addr"), line_no, "addr")
        width = int(op.get("width", 1))
        if "value" not in op:
            raise TraceError(line_no, "store needs a value")
        value = op["value"]
        value = int(value, 16) if isinstance(value, str) else int(value)
        exc = machine.store(addr, width, value)
        return {"violation": exc.kind.value if exc else None}
    if verb == "cform":
        addr = _parse_u64(op.get("addr"), line_no, "addr")
        req = CformRequest(
            addr,
            _parse_u64(op.get("set", 0), line_no, "set"),
            _parse_u64(op.get("mask", 0), line_no, "mask"),
        )
        exc = machine.cform_at(req)
        return {"violation": exc.kind.value if exc else None}
    if verb == "malloc":
        return _malloc(op, heap, structs, line_no)
    if verb == "free":
        if "id" not in op:
            raise TraceError(line_no, "free needs an id")
        heap.free(op["id"], non_temporal=bool(op.get("non_temporal", False)))
        return {}
    if verb == "whitelist_enter":
        machine.whitelist_enter()
        return {}
    if verb == "whitelist_exit":
        machine.whitelist_exit()
        return {}
    if verb == "flush":
        machine.flush()
        return {}
    raise TraceError(line_no, f"unknown op {verb!r}")


def _malloc(op: dict, heap: Heap, structs, line_no: int):
    if "fields" in op:
        try:
            fields = [_trace_field(raw, line_no) for raw in op["fields"]]
        except LayoutError as e:
            raise TraceError(line_no, str(e)) from None
    elif "type" in op:
        try:
            fields = list(structs[op["type"]])
        except KeyError:
            raise TraceError(
                line_no, f"unknown struct type {op['type']!r} "
                "(pass a definitions file)") from None
    else:
        raise TraceError(line_no, "malloc needs a type name or inline fields")
    try:
        layout = compute_layout(fields, op.get("type", "<inline>"))
        cl = caliform_layout(
            layout,
            Policy.from_string(op.get("policy", "opportunistic")),
            seed=int(op.get("seed", 0)),
            min_pad=int(op.get("min", 1)),
            max_pad=int(op.get("max", 7)),
        )
    except LayoutError as e:
        raise TraceError(line_no, str(e)) from None
    alloc = heap.alloc(cl, op.get("id"))
    return {"id": alloc.alloc_id, "base": alloc.base, "size": alloc.size}


def _trace_field(raw: dict, line_no: int) -> FieldDef:
    try:
        name, type_name = raw["name"], raw["type"]
    except (TypeError, KeyError):
        raise TraceError(line_no, "each field needs name and type") from None
    if type_name == "pointer":
        return FieldDef.pointer(name)
    if type_name == "function_pointer":
        return FieldDef.function_pointer(name)
    if "count" in raw:
        return FieldDef.array(name, type_name, int(raw["count"]))
    return FieldDef.scalar(name, type_name)


def build_stats(machine: MachineState, heap: Heap, stopped: bool = False) -> dict:
    violations_by_kind: dict[str, int] = {}
    for exc in machine.exception_log:
        violations_by_kind[exc.kind.value] = violations_by_kind.get(exc.kind.value, 0) + 1
    heap_stats = dict(heap.stats())
    heap_stats["violations_by_kind"] = violations_by_kind
    return {
        "version": STATS_VERSION,
        "counters": machine.counters.as_dict(),
        "exceptions": [
            {"kind": e.kind.value, "addr": f"{e.addr:#x}", "op_index": e.op_index}
            for e in machine.exception_log
        ],
        "heap": heap_stats,
        "stopped_early": stopped,
    }
