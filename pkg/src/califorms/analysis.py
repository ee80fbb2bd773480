"""Derandomization-attack math and its Monte Carlo cross-check.

An attacker hunting for an object in memory must probe allocations without
touching a security byte.  With a fraction ``f`` of each object blacklisted
and ``O`` objects to cross, the scan survives with probability
``(1 - f) ** O``.  Direct evaluation at f = 0.1, O = 250 gives about
3.64e-12; a figure of 1e-20 is sometimes quoted for these parameters but
does not match the formula, so this module reports the computed value (see
docs/attack-model.md).

Once a single object remains, guessing its layout means guessing each
random span's width: ``(1 / widths) ** n`` for ``n`` spans drawn from
``widths`` distinct sizes (7 for the default 1..7 range).

The Monte Carlo estimator models one uniformly placed single-byte probe per
object and per trial; detection is touching any security byte.  That
estimator targets ``1 - (1 - f) ** O`` exactly, which is what the closed
form describes.  Scenarios can be built from layouts directly or read back
from a live heap, which cross-checks that the allocator and memory model
actually placed the spans.  Trials are deterministic per seed; shard the
trial count with distinct seeds if you want to parallelize.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .allocator import Heap
from .cacheline import LINE_BYTES
from .layout import CaliformedLayout
from .memsys import MachineState


@dataclass(frozen=True)
class AttackParams:
    """Scan-attack parameters: blacklisted fraction and object count."""

    security_fraction: float  # P/N: security bytes per object byte
    objects: int              # O: allocations the scan must cross

    def __post_init__(self) -> None:
        if not 0.0 <= self.security_fraction <= 1.0:
            raise ValueError(f"security_fraction must be in [0, 1], got {self.security_fraction}")
        if self.objects < 0:
            raise ValueError(f"objects must be non-negative, got {self.objects}")


def scan_survival_probability(params: AttackParams) -> float:
    """Probability a full scan touches no security byte: (1 - f) ** O."""
    return (1.0 - params.security_fraction) ** params.objects


def scan_detection_probability(params: AttackParams) -> float:
    return 1.0 - scan_survival_probability(params)


def guess_success_probability(spans: int, span_min: int = 1, span_max: int = 7) -> float:
    """Probability of guessing ``spans`` random span widths: (1/widths) ** n."""
    if spans < 0:
        raise ValueError(f"spans must be non-negative, got {spans}")
    if not 1 <= span_min <= span_max:
        raise ValueError(f"need 1 <= span_min <= span_max, got [{span_min}, {span_max}]")
    widths = span_max - span_min + 1
    return (1.0 / widths) ** spans


@dataclass(frozen=True)
class ScanObject:
    size: int
    security_offsets: frozenset[int]

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError("object size must be positive")
        if any(not 0 <= off < self.size for off in self.security_offsets):
            raise ValueError("security offset outside the object")

    @property
    def security_fraction(self) -> float:
        return len(self.security_offsets) / self.size


def scenario_from_layouts(layouts: list[CaliformedLayout]) -> list[ScanObject]:
    return [ScanObject(cl.total_size, cl.security_offsets()) for cl in layouts]


def scenario_from_heap(machine: MachineState, heap: Heap) -> list[ScanObject]:
    """Build the scenario from live allocations by reading machine masks.

    Observing the masks (rather than trusting the layouts) validates that
    the allocator's CFORM plans actually reached the memory model.
    """
    objects = []
    for alloc in heap.live.values():
        offsets = set()
        for line in range(alloc.base, alloc.base + alloc.size, LINE_BYTES):
            mask = machine.peek_line(line).mask
            for i, is_sec in enumerate(mask):
                if is_sec:
                    offsets.add(line + i - alloc.base)
        objects.append(ScanObject(alloc.size, frozenset(offsets)))
    return objects


def monte_carlo_scan(objects: list[ScanObject], trials: int, seed: int) -> float:
    """Fraction of trials in which probing every object touches a security
    byte at least once (one uniform byte probe per object)."""
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = random.Random(seed)
    detected = 0
    for _ in range(trials):
        for obj in objects:
            if rng.randrange(obj.size) in obj.security_offsets:
                detected += 1
                break
    return detected / trials


def binomial_sigma(p: float, trials: int) -> float:
    return math.sqrt(p * (1.0 - p) / trials)
