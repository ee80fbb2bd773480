import pytest
from hypothesis import given
from hypothesis import strategies as st

from califorms import (
    AttackParams,
    FieldDef,
    Heap,
    MachineState,
    Policy,
    ScanObject,
    caliform_layout,
    compute_layout,
    guess_success_probability,
    monte_carlo_scan,
    scan_detection_probability,
    scan_survival_probability,
    scenario_from_heap,
    scenario_from_layouts,
)
from califorms.analysis import binomial_sigma


class TestClosedForms:
    def test_single_object(self):
        assert scan_survival_probability(AttackParams(0.1, 1)) == pytest.approx(0.9)

    def test_many_objects(self):
        p = scan_survival_probability(AttackParams(0.1, 250))
        assert p == 0.9**250
        # frozen from exact rational evaluation of (9/10)^250
        assert p == pytest.approx(3.636029179587e-12, rel=1e-10, abs=0)

    def test_no_security_bytes(self):
        assert scan_survival_probability(AttackParams(0.0, 12345)) == 1.0

    def test_guess_single_span(self):
        assert guess_success_probability(1) == pytest.approx(1 / 7)

    def test_guess_no_spans(self):
        assert guess_success_probability(0) == 1.0

    def test_guess_three_spans(self):
        assert guess_success_probability(3) == pytest.approx(1 / 343)

    def test_guess_generalizes_to_other_ranges(self):
        assert guess_success_probability(2, span_min=2, span_max=4) == pytest.approx(1 / 9)

    @given(st.floats(0, 1), st.integers(0, 500), st.integers(0, 500))
    def test_survival_non_increasing_in_objects(self, frac, o1, o2):
        lo, hi = sorted((o1, o2))
        assert scan_survival_probability(AttackParams(frac, hi)) <= \
            scan_survival_probability(AttackParams(frac, lo))

    @given(st.integers(0, 100), st.floats(0, 1), st.floats(0, 1))
    def test_survival_non_increasing_in_fraction(self, objects, f1, f2):
        lo, hi = sorted((f1, f2))
        assert scan_survival_probability(AttackParams(hi, objects)) <= \
            scan_survival_probability(AttackParams(lo, objects))

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            AttackParams(1.5, 1)
        with pytest.raises(ValueError):
            AttackParams(0.5, -1)
        with pytest.raises(ValueError):
            guess_success_probability(-1)
        with pytest.raises(ValueError):
            guess_success_probability(1, span_min=3, span_max=1)


def tenth_blacklisted() -> ScanObject:
    return ScanObject(640, frozenset(range(576, 640)))


class TestMonteCarlo:
    def test_zero_security_bytes_never_detects(self):
        objects = [ScanObject(64, frozenset())] * 5
        assert monte_carlo_scan(objects, trials=500, seed=1) == 0.0

    def test_all_security_always_detects(self):
        objects = [ScanObject(64, frozenset(range(64)))]
        assert monte_carlo_scan(objects, trials=500, seed=1) == 1.0

    def test_matches_closed_form_within_three_sigma(self):
        objects = [tenth_blacklisted() for _ in range(10)]
        trials = 20000
        rate = monte_carlo_scan(objects, trials=trials, seed=99)
        p = scan_detection_probability(AttackParams(0.1, 10))
        assert abs(rate - p) <= 3 * binomial_sigma(p, trials)

    def test_deterministic_per_seed(self):
        objects = [tenth_blacklisted() for _ in range(3)]
        a = monte_carlo_scan(objects, trials=2000, seed=5)
        b = monte_carlo_scan(objects, trials=2000, seed=5)
        c = monte_carlo_scan(objects, trials=2000, seed=6)
        assert a == b
        assert a != c  # overwhelmingly likely at this trial count

    def test_scenario_from_layouts(self):
        cl = caliform_layout(
            compute_layout([FieldDef.scalar("c", "char"), FieldDef.scalar("i", "int")]),
            Policy.OPPORTUNISTIC,
        )
        [obj] = scenario_from_layouts([cl])
        assert obj.size == 8
        assert obj.security_offsets == frozenset({1, 2, 3})

    def test_scenario_from_heap_reads_real_masks(self):
        machine = MachineState()
        heap = Heap(machine, size=64 * 1024)
        cl = caliform_layout(
            compute_layout([FieldDef.scalar("c", "char"), FieldDef.scalar("i", "int")]),
            Policy.OPPORTUNISTIC,
        )
        heap.alloc(cl, "a")
        [obj] = scenario_from_heap(machine, heap)
        assert obj.size == 64
        # the layout's spans plus the line-rounding guard bytes
        assert obj.security_offsets == frozenset({1, 2, 3}) | frozenset(range(8, 64))

    def test_detection_through_real_loads_agrees(self):
        # cross-check the probe model against actual machine loads
        machine = MachineState()
        heap = Heap(machine, size=64 * 1024)
        fields = [FieldDef.array("buf", "char", 576)]
        base_layout = compute_layout(fields)
        cl = caliform_layout(base_layout, Policy.FULL, seed=2, min_pad=4, max_pad=4)
        allocs = [heap.alloc(cl) for _ in range(4)]
        objects = scenario_from_heap(machine, heap)
        import random

        rng = random.Random(31337)
        trials = 300
        detected = 0
        for _ in range(trials):
            for alloc, obj in zip(allocs, objects):
                off = rng.randrange(alloc.size)
                before = len(machine.exception_log)
                machine.load(alloc.base + off, 1)
                hit = len(machine.exception_log) > before
                assert hit == (off in obj.security_offsets)
                if hit:
                    detected += 1
                    break
        f = objects[0].security_fraction
        p = scan_detection_probability(AttackParams(f, len(objects)))
        assert abs(detected / trials - p) <= 4 * binomial_sigma(p, trials)
