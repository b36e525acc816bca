import itertools
import random

import pytest

from insortagg.core import (
    AggregateKind,
    AggregateSpec,
    ColumnSpec,
    INT64,
    UTF8,
    InvalidInputError,
    MetricsLedger,
    Row,
    Schema,
    compare_rows,
)

from conftest import int_schema


def naive_compare(a, b):
    """Column-by-column oracle returning (sign, first-diff offset)."""
    for i, (va, vb) in enumerate(zip(a, b)):
        if va != vb:
            return (-1 if va < vb else 1), i
    return 0, len(a)


class TestCompareRows:
    def test_prefix_difference(self):
        sch = int_schema(4, 100)
        led = MetricsLedger()
        sign, off = compare_rows(Row((5, 7, 3, 9)), Row((5, 7, 3, 12)),
                                 sch, led)
        assert sign == -1 and off == 3
        assert led.column_value_accesses == 8
        assert led.row_comparisons == 1

    def test_equal_keys_touch_all_columns(self):
        sch = int_schema(4, 100)
        led = MetricsLedger()
        sign, off = compare_rows(Row((5, 9, 2, 7)), Row((5, 9, 2, 7)),
                                 sch, led)
        assert sign == 0 and off == 4
        assert led.column_value_accesses == 8

    def test_agrees_with_naive_scan(self):
        sch = int_schema(4, 10)
        rng = random.Random(1)
        led = MetricsLedger()
        for _ in range(2000):
            a = tuple(rng.randrange(10) for _ in range(4))
            b = tuple(rng.randrange(10) for _ in range(4))
            before = led.column_value_accesses
            sign, off = compare_rows(Row(a), Row(b), sch, led)
            want_sign, want_off = naive_compare(a, b)
            assert (sign, off) == (want_sign, want_off)
            # accesses stop at the first differing column, exactly
            assert led.column_value_accesses - before == \
                2 * (min(off, 3) + 1)

    def test_arity_mismatch_rejected(self):
        sch = int_schema(3, 100)
        with pytest.raises(InvalidInputError):
            compare_rows(Row((1, 2)), Row((1, 2, 3)), sch, MetricsLedger())


class TestAggregateStates:
    def make_schema(self):
        return Schema(
            [ColumnSpec("k", INT64, 100)],
            [AggregateSpec("n", AggregateKind.COUNT),
             AggregateSpec("s", AggregateKind.SUM, "v"),
             AggregateSpec("lo", AggregateKind.MIN, "v"),
             AggregateSpec("hi", AggregateKind.MAX, "v"),
             AggregateSpec("mean", AggregateKind.AVG, "v")])

    def test_counter_addition(self):
        sch = Schema([ColumnSpec("k", INT64, 10)],
                     [AggregateSpec("n", AggregateKind.COUNT)])
        a, b = (3,), (5,)
        assert sch.merge_states(a, b) == (8,)

    def test_average_carries_sum_and_count(self):
        sch = Schema([ColumnSpec("k", INT64, 10)],
                     [AggregateSpec("mean", AggregateKind.AVG, "v")])
        merged = sch.merge_states((10, 2), (5, 1))
        assert merged == (15, 3)
        assert sch.finalize(merged) == (5.0,)

    def test_merge_order_never_matters(self):
        sch = self.make_schema()
        rng = random.Random(7)
        for _ in range(60):
            n = rng.randrange(2, 7)
            states = [sch.make_state((v,) * 5)
                      for v in (rng.randrange(100) for _ in range(n))]
            results = set()
            for perm in itertools.permutations(states):
                acc = perm[0]
                for s in perm[1:]:
                    acc = sch.merge_states(acc, s)
                results.add(acc)
            assert len(results) == 1

    def test_state_of_two_rows_equals_row_merged_into_state(self):
        sch = self.make_schema()
        s1 = sch.make_state((4,) * 5)
        s2 = sch.make_state((9,) * 5)
        merged = sch.merge_states(s1, s2)
        assert merged == (2, 13, 4, 9, 13, 2)
        assert sch.finalize(merged) == (2, 13, 4, 9, 6.5)

    def test_slot_mismatch_rejected(self):
        sch = self.make_schema()
        with pytest.raises(InvalidInputError):
            sch.merge_states((1, 2), sch.make_state((1,) * 5))


class TestSchemaValidation:
    def test_needs_key_columns(self):
        with pytest.raises(InvalidInputError):
            Schema([])

    def test_duplicate_names_rejected(self):
        with pytest.raises(InvalidInputError):
            Schema([ColumnSpec("k", INT64, 10), ColumnSpec("k", INT64, 10)])

    def test_ovc_prefix_stops_at_string_column(self):
        sch = Schema([ColumnSpec("a", INT64, 50), ColumnSpec("b", UTF8),
                      ColumnSpec("c", INT64, 10)])
        assert sch.ovc_prefix == 1
        assert sch.ovc_domain == 50


class TestLedger:
    def test_read_back_cannot_exceed_spilled(self):
        led = MetricsLedger()
        led.rows_spilled = 5
        led.rows_read_back = 5
        led.check_invariants()
        led.rows_read_back = 6
        with pytest.raises(Exception):
            led.check_invariants()
