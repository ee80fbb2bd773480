import random

import pytest

from califorms import CaliLine


def random_line(rng: random.Random) -> CaliLine:
    """One random line: uniform security count 0..64, random positions/data."""
    k = rng.randint(0, 64)
    return CaliLine.from_security_offsets(rng.randbytes(64), rng.sample(range(64), k))


def adversarial_lines() -> list[CaliLine]:
    """Constructed worst cases for the sentinel search.

    Lines whose non-security bytes cover 63 distinct low-6-bit patterns
    leave exactly one free sentinel value; rotations exercise every
    possible survivor.
    """
    lines = []
    for missing in range(64):
        patterns = [p for p in range(64) if p != missing]
        data = bytes(patterns + [0xFF])  # byte 63 is the security byte
        lines.append(CaliLine.from_security_offsets(data, [63]))
    # high security density with clashing residues
    for k in (4, 32, 63, 64):
        data = bytes((i * 7) % 256 for i in range(64))
        lines.append(CaliLine.from_security_offsets(data, range(k)))
        lines.append(CaliLine.from_security_offsets(data, range(64 - k, 64)))
    return lines


def zeroed_at_security(line: CaliLine) -> bytes:
    """Expected decode output: original data with security positions zeroed."""
    return bytes(0 if line.mask[i] else line.data[i] for i in range(64))


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0DEC)
