"""Functional simulator and analysis toolkit for byte-granular memory
blacklisting with califormed cache lines."""

from .cacheline import (
    CaliLine,
    ChunkedLine1B,
    ChunkedLine4B,
    CodecError,
    EncodedLine,
    decode_1B,
    decode_4B,
    decode_sentinel,
    decode_sentinel_header,
    encode_1B,
    encode_4B,
    encode_sentinel,
    find_sentinel,
)
from .cform import (
    CaliformsException,
    CformRequest,
    ExceptionMask,
    FaultKind,
    apply_cform,
)
from .memsys import LsqOp, LsqResult, MachineState
from .layout import (
    CaliformedLayout,
    FieldDef,
    FieldKind,
    LayoutError,
    Policy,
    StructLayout,
    caliform_layout,
    compute_layout,
    density_histogram,
    emit_cform_plan,
)
from .allocator import AllocationError, Heap, Stack
from .analysis import (
    AttackParams,
    ScanObject,
    guess_success_probability,
    monte_carlo_scan,
    scan_detection_probability,
    scan_survival_probability,
    scenario_from_heap,
    scenario_from_layouts,
)
from .trace import TraceError, TraceResult, run_trace

__version__ = "0.1.0"
