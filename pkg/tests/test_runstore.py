import random

import pytest

from insortagg.core import (
    AggregateKind,
    AggregateSpec,
    ColumnSpec,
    CorruptionError,
    INT64,
    UTF8,
    InvalidInputError,
    MetricsLedger,
    OrderingViolationError,
    Row,
    Schema,
)
from insortagg.runstore import (
    FileStore,
    MemoryStore,
    RowCodec,
    RunWriter,
    iter_run,
    read_page,
    write_run,
)

from conftest import count_schema, int_schema


def sorted_rows(schema, n, start=0):
    return [Row((start + i,), schema.make_state((None,))
                if schema.aggregates else ()) for i in range(n)]


class TestWriteRun:
    def test_page_arithmetic(self):
        sch = int_schema()
        codec = RowCodec(sch)
        led = MetricsLedger()
        store = MemoryStore()
        meta = write_run(sorted_rows(sch, 2000), store, codec, 100, led)
        assert meta.row_count == 2000
        assert meta.page_count == 20
        assert led.pages_written == 20
        assert led.rows_spilled == 2000

    def test_empty_run_rejected(self):
        sch = int_schema()
        with pytest.raises(InvalidInputError):
            write_run([], MemoryStore(), RowCodec(sch), 100)

    def test_unsorted_stream_rejected(self):
        sch = int_schema()
        rows = [Row((3,)), Row((1,))]
        with pytest.raises(OrderingViolationError):
            write_run(rows, MemoryStore(), RowCodec(sch), 100)

    def test_duplicate_keys_rejected_when_unique_required(self):
        sch = int_schema()
        rows = [Row((3,)), Row((3,))]
        with pytest.raises(OrderingViolationError):
            write_run(rows, MemoryStore(), RowCodec(sch), 100,
                      strict_unique=True)
        write_run(rows, MemoryStore(), RowCodec(sch), 100)  # allowed plain

    def test_round_trip_bit_exact(self):
        sch = count_schema()
        codec = RowCodec(sch)
        store = MemoryStore()
        rows = sorted_rows(sch, 257)
        meta = write_run(rows, store, codec, 16)
        got = list(iter_run(store, codec, meta))
        assert [(r.key, tuple(r.state)) for r in got] == \
            [(r.key, tuple(r.state)) for r in rows]


class TestReadPage:
    def test_first_page_starts_at_min_key(self):
        sch = int_schema()
        codec = RowCodec(sch)
        store = MemoryStore()
        meta = write_run(sorted_rows(sch, 500, start=42), store, codec, 64)
        page0 = read_page(store, codec, meta, 0)
        assert page0[0].key == meta.min_key == (42,)

    def test_pages_in_order_ascending_across_boundaries(self):
        sch = int_schema()
        codec = RowCodec(sch)
        store = MemoryStore()
        led = MetricsLedger()
        meta = write_run(sorted_rows(sch, 530), store, codec, 64, led)
        prev = None
        total = 0
        for i in range(meta.page_count):
            for row in read_page(store, codec, meta, i, led):
                assert prev is None or prev < row.key
                prev = row.key
                total += 1
        assert total == 530
        assert led.pages_read == meta.page_count
        assert led.rows_read_back == 530

    def test_out_of_range_rejected(self):
        sch = int_schema()
        codec = RowCodec(sch)
        store = MemoryStore()
        meta = write_run(sorted_rows(sch, 10), store, codec, 4)
        with pytest.raises(InvalidInputError):
            read_page(store, codec, meta, meta.page_count)

    def test_corruption_detected(self):
        sch = int_schema()
        codec = RowCodec(sch)
        store = MemoryStore()
        meta = write_run(sorted_rows(sch, 10), store, codec, 4)
        raw = bytearray(store.page_bytes(meta.run_id, 0))
        raw[-1] ^= 0xFF
        store._pages[meta.run_id][0] = bytes(raw)
        with pytest.raises(CorruptionError):
            read_page(store, codec, meta, 0)


class TestSerialization:
    def mixed_schema(self):
        return Schema(
            [ColumnSpec("a", INT64, 1000), ColumnSpec("b", UTF8),
             ColumnSpec("c", INT64, 50)],
            [AggregateSpec("n", AggregateKind.COUNT),
             AggregateSpec("s", AggregateKind.SUM, "v")])

    def test_random_round_trips_all_column_types(self):
        sch = self.mixed_schema()
        codec = RowCodec(sch)
        rng = random.Random(17)
        words = ["", "a", "plum", "päärynä", "x" * 300]
        for _ in range(50):
            keys = sorted({
                (rng.randrange(1000), rng.choice(words), rng.randrange(50))
                for _ in range(rng.randrange(1, 60))})
            rows = [Row(k, sch.make_state((None, rng.randrange(-5000, 5000))))
                    for k in keys]
            store = MemoryStore()
            meta = write_run(rows, store, codec, 7)
            got = list(iter_run(store, codec, meta))
            assert [(r.key, tuple(r.state)) for r in got] == \
                [(r.key, tuple(r.state)) for r in rows]

    def test_negative_accumulators_survive(self):
        sch = self.mixed_schema()
        codec = RowCodec(sch)
        rows = [Row((1, "q", 2), (3, -(2**40)))]
        store = MemoryStore()
        meta = write_run(rows, store, codec, 4)
        (got,) = list(iter_run(store, codec, meta))
        assert tuple(got.state) == (3, -(2**40))


class TestStores:
    def test_file_store_bytes_identical_to_memory_store(self, tmp_path):
        sch = count_schema()
        codec = RowCodec(sch)
        rows = sorted_rows(sch, 333)
        mem = MemoryStore()
        fil = FileStore(str(tmp_path / "spill"))
        meta_m = write_run(rows, mem, codec, 50)
        meta_f = write_run(rows, fil, codec, 50)
        assert meta_m.page_count == meta_f.page_count
        for i in range(meta_m.page_count):
            assert mem.page_bytes(meta_m.run_id, i) == \
                fil.page_bytes(meta_f.run_id, i)
        fil.close()

    def test_retained_rows_returned_with_caches(self):
        sch = int_schema(2, 100)
        codec = RowCodec(sch)
        store = MemoryStore(retain_rows=True)
        rows = [Row((i, i + 1)) for i in range(20)]
        rows[0].ovc = [7, None]
        meta = write_run(rows, store, codec, 8)
        got = read_page(store, codec, meta, 0)
        assert got[0] is rows[0]
        assert got[0].ovc == [7, None]

    def test_level_zero_spill_accounting(self):
        # sum of level-0 run row counts equals rows spilled at generation
        sch = int_schema()
        codec = RowCodec(sch)
        led = MetricsLedger()
        store = MemoryStore()
        metas = [write_run(sorted_rows(sch, n, start=i * 10_000), store,
                           codec, 32, led, level=0)
                 for i, n in enumerate((100, 257, 33))]
        assert sum(m.row_count for m in metas) == led.rows_spilled == 390
