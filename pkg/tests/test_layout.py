import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from califorms import (
    CformRequest,
    FieldDef,
    FieldKind,
    LayoutError,
    MachineState,
    Policy,
    caliform_layout,
    compute_layout,
    density_histogram,
    emit_cform_plan,
)

CHAR_INT = [FieldDef.scalar("c", "char"), FieldDef.scalar("i", "int")]

REFERENCE_FIELDS = [
    FieldDef.scalar("c", "char"),
    FieldDef.scalar("i", "int"),
    FieldDef.array("buf", "char", 64),
    FieldDef.function_pointer("fp"),
    FieldDef.scalar("d", "double"),
]


def spans_as_set(spans):
    return {off + j for off, length in spans for j in range(length)}


class TestComputeLayout:
    def test_char_int(self):
        layout = compute_layout(CHAR_INT)
        assert layout.offsets == (0, 4)
        assert layout.total_size == 8
        assert layout.padding_spans == ((1, 3),)
        assert layout.density == 5 / 8

    def test_reference_struct(self):
        layout = compute_layout(REFERENCE_FIELDS, "A")
        assert layout.offsets == (0, 4, 8, 72, 80)
        assert layout.total_size == 88
        assert layout.padding_spans == ((1, 3),)
        assert layout.density == 85 / 88

    def test_single_double(self):
        layout = compute_layout([FieldDef.scalar("d", "double")])
        assert layout.total_size == 8
        assert not layout.padding_spans
        assert layout.density == 1.0

    def test_trailing_padding(self):
        layout = compute_layout([FieldDef.scalar("i", "int"), FieldDef.scalar("c", "char")])
        assert layout.total_size == 8
        assert layout.padding_spans == ((5, 3),)

    def test_empty_field_list_rejected(self):
        with pytest.raises(LayoutError):
            compute_layout([])

    def test_zero_size_field_rejected(self):
        with pytest.raises(LayoutError):
            FieldDef("x", FieldKind.SCALAR, 0, 1)

    @pytest.mark.skipif(struct.calcsize("@P") != 8, reason="needs an LP64 host")
    def test_against_platform_abi(self):
        # independent oracle: the host C ABI via the struct module
        cases = [
            ("ci", CHAR_INT),
            ("ci64cPd", REFERENCE_FIELDS),
            ("hc", [FieldDef.scalar("s", "short"), FieldDef.scalar("c", "char")]),
            ("qcd", [FieldDef.scalar("l", "long"), FieldDef.scalar("c", "char"),
                     FieldDef.scalar("d", "double")]),
            ("cP", [FieldDef.scalar("c", "char"), FieldDef.pointer("p")]),
        ]
        for fmt, fields in cases:
            # '@' + format + trailing '0X' pads to the struct's max alignment
            widest = max(fields, key=lambda f: f.alignment)
            code = {1: "c", 2: "h", 4: "i", 8: "q"}[widest.alignment]
            expected = struct.calcsize(f"@{fmt}0{code}")
            assert compute_layout(fields).total_size == expected, fmt


class TestPolicies:
    def test_opportunistic_reuses_padding_exactly(self):
        cl = caliform_layout(compute_layout(CHAR_INT), Policy.OPPORTUNISTIC)
        assert cl.security_spans == ((1, 3),)
        assert cl.field_offsets == (0, 4)
        assert cl.overhead == 0

    def test_full_fixed_width_spans(self):
        cl = caliform_layout(compute_layout(CHAR_INT), Policy.FULL,
                             seed=1, min_pad=2, max_pad=2)
        # leading 2, char at 2, gap to int merged with alignment, trailing 2
        assert cl.field_offsets[0] == 2
        gap = cl.field_offsets[1] - 3  # bytes strictly between c and i
        assert gap >= 2
        covered = spans_as_set(cl.security_spans)
        assert set(range(0, 2)) <= covered
        assert set(range(3, cl.field_offsets[1])) <= covered
        assert set(range(cl.field_offsets[1] + 4, cl.total_size)) <= covered
        assert not cl.padding_spans  # every gap became security bytes

    def test_full_separates_every_adjacent_pair(self):
        layout = compute_layout(REFERENCE_FIELDS)
        for seed in range(20):
            cl = caliform_layout(layout, Policy.FULL, seed=seed, min_pad=1, max_pad=7)
            covered = spans_as_set(cl.security_spans)
            for (prev, f_prev), (cur, _) in zip(
                zip(cl.field_offsets, layout.fields),
                zip(cl.field_offsets[1:], layout.fields[1:]),
            ):
                between = set(range(prev + f_prev.size, cur))
                assert len(between & covered) >= 1

    def test_intelligent_guards_arrays_and_pointers_only(self):
        layout = compute_layout(REFERENCE_FIELDS)
        cl = caliform_layout(layout, Policy.INTELLIGENT, seed=3)
        covered = spans_as_set(cl.security_spans)
        offs = dict(zip([f.name for f in layout.fields], cl.field_offsets))
        # three spans: before buf, between buf and fp (shared), after fp
        assert len(cl.security_spans) == 3
        assert offs["c"] == 0
        assert offs["i"] == 4  # c|i boundary stays plain alignment padding
        assert set(range(5, offs["i"])) == set()
        assert (1 in covered) is False
        assert set(range(offs["i"] + 4, offs["buf"])) <= covered
        assert set(range(offs["buf"] + 64, offs["fp"])) <= covered
        assert set(range(offs["fp"] + 8, offs["d"])) <= covered
        assert offs["d"] + 8 == cl.total_size  # no trailing span after a scalar

    def test_intelligent_unprotected_struct_gets_no_spans(self):
        cl = caliform_layout(compute_layout(CHAR_INT), Policy.INTELLIGENT, seed=9)
        assert cl.security_spans == ()
        assert cl.total_size == 8
        assert cl.padding_spans == ((1, 3),)

    def test_deterministic_per_seed(self):
        layout = compute_layout(REFERENCE_FIELDS)
        a = caliform_layout(layout, Policy.FULL, seed=77, min_pad=1, max_pad=7)
        b = caliform_layout(layout, Policy.FULL, seed=77, min_pad=1, max_pad=7)
        c = caliform_layout(layout, Policy.FULL, seed=78, min_pad=1, max_pad=7)
        assert a == b
        assert a != c

    def test_span_lengths_respect_bounds(self):
        layout = compute_layout(
            [FieldDef.scalar("a", "char"), FieldDef.scalar("b", "char")]
        )
        for seed in range(50):
            cl = caliform_layout(layout, Policy.FULL, seed=seed, min_pad=1, max_pad=3)
            # char fields have no alignment need, so gaps equal the raw draws
            for _, length in cl.security_spans:
                assert 1 <= length <= 3

    def test_pad_bounds_validated(self):
        with pytest.raises(LayoutError):
            caliform_layout(compute_layout(CHAR_INT), Policy.FULL, min_pad=0, max_pad=3)
        with pytest.raises(LayoutError):
            caliform_layout(compute_layout(CHAR_INT), Policy.FULL, min_pad=5, max_pad=3)

    fields_st = st.lists(
        st.sampled_from(
            [
                FieldDef.scalar("c", "char"),
                FieldDef.scalar("s", "short"),
                FieldDef.scalar("i", "int"),
                FieldDef.scalar("d", "double"),
                FieldDef.pointer("p"),
                FieldDef.function_pointer("f"),
                FieldDef.array("a", "int", 3),
            ]
        ),
        min_size=1,
        max_size=8,
    )

    @given(fields_st, st.sampled_from(list(Policy)), st.integers(0, 2**32))
    def test_fields_never_overlap_security_spans(self, sampled, policy, seed):
        fields = [
            FieldDef(f"{f.name}{i}", f.kind, f.size, f.alignment, f.element_type, f.count)
            for i, f in enumerate(sampled)
        ]
        cl = caliform_layout(compute_layout(fields), policy, seed=seed)
        covered = spans_as_set(cl.security_spans)
        for f, off in zip(fields, cl.field_offsets):
            assert not covered & set(range(off, off + f.size))
            assert off % f.alignment == 0

    @given(fields_st, st.integers(0, 2**32))
    def test_opportunistic_zero_overhead(self, fields, seed):
        cl = caliform_layout(compute_layout(fields), Policy.OPPORTUNISTIC, seed=seed)
        assert cl.overhead == 0


class TestHistogram:
    def test_single_struct(self):
        hist = density_histogram([compute_layout(CHAR_INT)], bins=8)
        assert hist["counts"][5] == 1  # 0.625 falls in [0.625, 0.75)
        assert sum(hist["counts"]) == 1
        assert hist["fraction_with_padding"] == 1.0

    def test_dense_struct_has_no_padding(self):
        hist = density_histogram([compute_layout([FieldDef.scalar("d", "double")])], 4)
        assert hist["fraction_with_padding"] == 0.0
        assert hist["counts"][3] == 1  # density 1.0 lands in the top bin

    def test_empty_input(self):
        hist = density_histogram([], bins=4)
        assert hist["counts"] == [0, 0, 0, 0]
        assert hist["structs"] == 0
        assert hist["fraction_with_padding"] == 0.0

    def test_bin_count_validated(self):
        with pytest.raises(LayoutError):
            density_histogram([], bins=0)


class TestCformPlan:
    def test_single_line_plan(self):
        cl = caliform_layout(compute_layout(CHAR_INT), Policy.OPPORTUNISTIC)
        plan = emit_cform_plan(cl, 0)
        assert plan == [CformRequest(0, 0b1110, 0b1110)]

    def test_only_touched_lines_get_requests(self):
        # an 88-byte object spans two lines, but its only span sits in the first
        cl = caliform_layout(compute_layout(REFERENCE_FIELDS), Policy.OPPORTUNISTIC)
        assert emit_cform_plan(cl, 0) == [CformRequest(0, 0b1110, 0b1110)]

    def test_span_crossing_a_line_boundary(self):
        fields = [FieldDef.array("a", "char", 62), FieldDef.array("b", "char", 8)]
        cl = caliform_layout(compute_layout(fields), Policy.FULL,
                             seed=0, min_pad=4, max_pad=4)
        plan = emit_cform_plan(cl, 0x1000)
        out_of_line = [r for r in plan if r.addr != 0x1000]
        assert len(plan) >= 2 and out_of_line
        # ... and the union of set bits equals the spans
        got = set()
        for req in plan:
            for i in range(64):
                if (req.set_bits >> i) & 1:
                    got.add(req.addr + i - 0x1000)
        assert got == spans_as_set(cl.security_spans)

    def test_empty_spans_empty_plan(self):
        cl = caliform_layout(compute_layout(CHAR_INT), Policy.INTELLIGENT)
        assert emit_cform_plan(cl, 0) == []

    def test_plan_applies_once_then_faults(self):
        machine = MachineState()
        cl = caliform_layout(compute_layout(REFERENCE_FIELDS), Policy.FULL, seed=5)
        base = 0x2000
        for req in emit_cform_plan(cl, base):
            assert machine.cform_at(req) is None
        observed = set()
        for line in range(base, base + ((cl.total_size + 63) // 64) * 64, 64):
            for i, bit in enumerate(machine.peek_line(line).mask):
                if bit:
                    observed.add(line + i - base)
        assert observed == spans_as_set(cl.security_spans)
        # re-applying the same plan trips IllegalSet
        from califorms import FaultKind
        exc = machine.cform_at(emit_cform_plan(cl, base)[0])
        assert exc is not None and exc.kind is FaultKind.ILLEGAL_SET
