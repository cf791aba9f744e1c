import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psm.scan_engine import (
    IDENTITY,
    Aggregator,
    CounterState,
    EmptyCounterError,
    OnlineScanner,
    ScanLengthError,
    bitwise_equal,
    counter_emit,
    counter_insert,
    occupied_bound,
    scan_online,
    scan_static,
    verify_duality,
)

ADD = Aggregator(lambda a, b: a + b, claims_associative=True, name="add")
SUB = Aggregator(lambda a, b: a - b, name="sub")
# records the nesting of every combine, so any change of parenthesisation shows up
PAREN = Aggregator(lambda a, b: f"({a}{b})", name="paren")


def tree_value(xs, lo, hi, agg):
    if hi - lo == 1:
        return xs[lo]
    mid = (lo + hi) // 2
    return agg(tree_value(xs, lo, mid, agg), tree_value(xs, mid, hi, agg))


def tree_prefix(xs, i, agg):
    """Exclusive prefix ``i`` by walking root to leaf."""
    lo, hi, p = 0, len(xs), IDENTITY
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if i < mid:
            hi = mid
        else:
            p = agg(p, tree_value(xs, lo, mid, agg))
            lo = mid
    return p


def block_fold(xs, m, agg):
    """Fold the aligned power-of-two blocks covering the first ``m`` items, oldest first."""
    p, start = IDENTITY, 0
    for bit in range(m.bit_length() - 1, -1, -1):
        size = 1 << bit
        if m & size:
            p = agg(p, tree_value(xs, start, start + size, agg))
            start += size
    return p


def letters(n):
    return [chr(ord("a") + i % 26) + str(i) for i in range(n)]


class TestIdentity:
    def test_singleton(self):
        assert type(IDENTITY)() is IDENTITY

    def test_short_circuit_never_calls_combine(self):
        def boom(a, b):
            raise AssertionError("combine called")

        agg = Aggregator(boom)
        assert agg(IDENTITY, 5) == 5
        assert agg(5, IDENTITY) == 5
        assert agg(IDENTITY, IDENTITY) is IDENTITY

    def test_identity_input_rejected(self):
        with pytest.raises(ValueError):
            scan_static([1, IDENTITY], ADD)
        with pytest.raises(ValueError):
            counter_insert(CounterState(), IDENTITY, ADD)


class TestStatic:
    def test_hand_example(self):
        assert scan_static([3, 1, 4, 1], ADD) == [IDENTITY, 3, 4, 8]

    def test_subtraction_hand_example(self):
        assert scan_static([5, 3, 2, 1], SUB) == [IDENTITY, 5, 2, 0]

    def test_left_projection(self):
        first = Aggregator(lambda a, b: a)
        assert scan_static(["p", "q", "r", "s"], first) == [IDENTITY, "p", "p", "p"]

    def test_single_element(self):
        out, total = scan_static([7], ADD, with_total=True)
        assert out == [IDENTITY] and total == 7

    def test_parenthesisation_n8(self):
        out = scan_static(list("abcdefgh"), PAREN)
        assert out == [IDENTITY, "a", "(ab)", "((ab)c)", "((ab)(cd))",
                       "(((ab)(cd))e)", "(((ab)(cd))(ef))", "((((ab)(cd))(ef))g)"]

    def test_subtraction_follows_tree(self):
        # ((1-2)-(3-4)) is the root; prefix 3 is (1-2)-3
        out, total = scan_static([1.0, 2.0, 3.0, 4.0], SUB, with_total=True)
        assert out[3] == -4.0 and total == 0.0

    @pytest.mark.parametrize("n", [0, 3, 6, 1000])
    def test_non_power_of_two(self, n):
        with pytest.raises(ScanLengthError):
            scan_static(list(range(n)), ADD)

    @pytest.mark.parametrize("n", [1, 2, 4, 16, 64])
    def test_matches_tree_oracle(self, n):
        xs = letters(n)
        out, total = scan_static(xs, PAREN, with_total=True)
        assert out == [tree_prefix(xs, i, PAREN) for i in range(n)]
        assert total == tree_value(xs, 0, n, PAREN)

    def test_workers_do_not_change_bits(self):
        xs = [float(x) for x in np.linspace(-3.0, 7.0, 64)]
        assert bitwise_equal(scan_static(xs, SUB), scan_static(xs, SUB, workers=4))

    def test_call_count_is_linear(self):
        calls = []
        agg = Aggregator(lambda a, b: calls.append(1) or a + b)
        scan_static(list(range(256)), agg)
        # upsweep n-1 combines, downsweep skips identity on the left spine
        assert len(calls) <= 2 * 256


class TestCounter:
    def test_hand_trace_n8(self):
        scanner = OnlineScanner(PAREN)
        emitted = [scanner.push(x) for x in "abcdefgh"]
        assert emitted == ["a", "(ab)", "((ab)c)", "((ab)(cd))", "(((ab)(cd))e)",
                           "(((ab)(cd))(ef))", "((((ab)(cd))(ef))g)", "(((ab)(cd))((ef)(gh)))"]
        assert scanner.trace.rows() == [
            (0, 0, 0, 1), (1, 1, 0, 1), (2, 0, 1, 2), (3, 2, 0, 1),
            (4, 0, 1, 2), (5, 1, 1, 2), (6, 0, 2, 3), (7, 3, 0, 1),
        ]

    def test_subtraction_emissions(self):
        out, _ = scan_online([5, 3, 2, 1], SUB)
        # last one is the full-tree root (5-3)-(2-1)
        assert out == [5, 2, 0, 1]

    def test_eight_inserts_merge_seven_times(self):
        scanner = OnlineScanner(ADD)
        for x in range(1, 9):
            scanner.push(x, emit=False)
        assert scanner.trace.insert_agg_calls == 7
        assert scanner.state.occupied_slots() == [3]
        assert scanner.state.slot(3) == 36

    def test_slots_follow_binary_digits(self):
        state = CounterState()
        for x in range(11):
            counter_insert(state, x, ADD)
        assert state.occupied_slots() == [0, 1, 3]
        assert state.slot(2) is None and state.slot(9) is None
        assert state.slot(3) == sum(range(8))

    def test_emit_on_empty(self):
        with pytest.raises(EmptyCounterError):
            counter_emit(CounterState(), ADD)

    def test_insert_only_matches_emit_mode_state(self):
        a, b = OnlineScanner(SUB), OnlineScanner(SUB)
        for x in range(1, 40):
            a.push(float(x), emit=False)
            b.push(float(x))
        assert bitwise_equal(a.state.root, b.state.root)

    def test_trace_csv(self):
        _, trace = scan_online([1, 2, 3], ADD)
        assert trace.to_csv() == "t,insert_calls,emit_calls,occupied_roots\n0,0,0,1\n1,1,0,1\n2,0,1,2\n"

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 200))
    def test_emission_matches_block_fold(self, m):
        xs = letters(m)
        out, _ = scan_online(xs, PAREN)
        assert out[-1] == block_fold(xs, m, PAREN)


class TestDuality:
    @pytest.mark.parametrize("n", [1, 2, 8, 32, 128])
    def test_parenthesisation_strings(self, n):
        report = verify_duality(letters(n), PAREN)
        assert report.ok, report.mismatches

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 8).flatmap(lambda k: st.lists(
        st.floats(-1e6, 1e6, allow_nan=False), min_size=2**k, max_size=2**k)))
    def test_float_subtraction(self, xs):
        report = verify_duality(xs, SUB)
        assert report.all_equal and report.ok

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300))
    def test_online_prefix_matches_padded_static(self, m):
        n = 1 << (m - 1).bit_length() if m > 1 else 1
        xs = letters(n)
        static, total = scan_static(xs, PAREN, with_total=True)
        out, _ = scan_online(xs[:m], PAREN)
        want = static[m] if m < n else total
        assert out[-1] == want

    def test_hash_combining_operator(self):
        mix = Aggregator(lambda a, b: hash((a, b, "mix")) & 0xFFFFFFFF)
        assert verify_duality(list(range(128)), mix).ok

    def test_report_flags_mismatch(self):
        state = {"calls": 0}

        def flaky(a, b):
            state["calls"] += 1
            return a + b + (1 if state["calls"] == 40 else 0)

        report = verify_duality(list(range(32)), Aggregator(flaky))
        assert not report.all_equal and not report.ok
        assert report.mismatches

    def test_stated_bound_only_fails_at_one_element(self):
        report = verify_duality(list(range(1024)), ADD)
        assert report.stated_bound_violations == [1]
        assert report.occupied_ok and report.emit_ok


class TestHelpers:
    def test_occupied_bound(self):
        assert [occupied_bound(m) for m in (1, 2, 3, 4, 5, 8, 9)] == [0, 1, 2, 2, 3, 3, 4]

    def test_bitwise_equal_distinguishes_signed_zero(self):
        assert not bitwise_equal(0.0, -0.0)
        assert not bitwise_equal(np.zeros(2), -np.zeros(2))
        assert bitwise_equal(math.nan, math.nan)

    def test_bitwise_equal_nested(self):
        assert bitwise_equal((1, [np.ones(2), "x"]), (1, [np.ones(2), "x"]))
        assert not bitwise_equal((1, [np.ones(2)]), (1, [np.ones(3)]))
        assert not bitwise_equal(1, 1.0)
