import random

import pytest

from insortagg.core import MetricsLedger, PlanningError, Row
from insortagg.memindex import OrderedIndex
from insortagg.runstore import MemoryStore, RowCodec, RunMeta, write_run
from insortagg.sortagg import (
    NeedsPreliminaryMerge,
    OutputEstimator,
    REPLACEMENT_SELECTION,
    SEPARATE,
    SortAggConfig,
    SortAggregate,
    TRADITIONAL,
    WIDE,
    index_run_generation,
    pq_run_generation,
    plan_merge,
    traditional_merge_step,
    wide_merge,
)

from conftest import count_schema, int_schema, reference


def cfg(memory, page, **kw):
    return SortAggConfig(memory_budget=memory, page_capacity=page, **kw)


def rows_uniform(rng, n, distinct, schema):
    keys = [rng.randrange(distinct) for _ in range(n - distinct)] + \
        list(range(distinct))
    rng.shuffle(keys)
    state = schema.make_state((None,)) if schema.aggregates else ()
    return [Row((k,), state) for k in keys]


def fake_runs(sizes, level=0):
    return [RunMeta(run_id=i, row_count=s, page_count=max(1, s // 100),
                    min_key=(0,), max_key=(10**9,), level=level)
            for i, s in enumerate(sizes)]


class TestRunGeneration:
    def test_small_output_never_spills(self):
        sch = count_schema()
        rng = random.Random(1)
        config = cfg(1000, 100)
        store = MemoryStore()
        led = MetricsLedger()
        rows = rows_uniform(rng, 50_000, 4, sch)
        runs, index, est, seen = index_run_generation(
            iter(rows), sch, config, store, RowCodec(sch), led)
        assert runs == [] and seen == 50_000
        assert led.rows_spilled == 0
        drained = index.evict_all()
        assert len(drained) == 4
        assert sum(st[0] for _, st in drained) == 50_000

    def test_read_sort_write_flushes_memory_sized_runs(self):
        sch = int_schema(1, 10**9)
        rng = random.Random(2)
        config = cfg(100, 10)
        store = MemoryStore()
        led = MetricsLedger()
        rows = [Row((rng.randrange(10**9),)) for _ in range(1050)]
        runs, index, est, seen = index_run_generation(
            iter(rows), sch, config, store, RowCodec(sch), led)
        assert index.resident_rows == 0
        assert all(m.row_count == 100 for m in runs[:-1])
        assert sum(m.row_count for m in runs) == 1050  # all keys distinct

    def test_replacement_selection_runs_near_twice_memory(self):
        sch = int_schema(1, 10**9)
        rng = random.Random(3)
        config = cfg(500, 50, run_generation_mode=REPLACEMENT_SELECTION)
        store = MemoryStore()
        rows = [Row((rng.randrange(10**9),)) for _ in range(40_000)]
        runs, index, est, seen = index_run_generation(
            iter(rows), sch, config, store, RowCodec(sch), MetricsLedger())
        body = [m.row_count for m in runs[1:-1]]
        mean = sum(body) / len(body)
        assert abs(mean - 1000) <= 100  # about 2M on random input

    def test_batched_input_same_result(self):
        sch = count_schema()
        rng = random.Random(4)
        rows = rows_uniform(rng, 4000, 600, sch)
        out_plain = SortAggregate(sch, cfg(100, 10), MemoryStore()) \
            .execute(iter(rows))
        out_batch = SortAggregate(sch, cfg(100, 10, batch_size=64),
                                  MemoryStore()).execute(iter(rows))
        key = lambda r: (r.key, r.state)
        assert list(map(key, out_batch)) == list(map(key, out_plain))

    def test_pq_generation_spills_everything_once_spilling(self):
        sch = int_schema(1, 10**9)
        rng = random.Random(5)
        config = cfg(128, 16, run_generation_mode=REPLACEMENT_SELECTION)
        rows = [Row((rng.randrange(10**9),)) for _ in range(5000)]
        led = MetricsLedger()
        runs, in_mem, seen = pq_run_generation(
            iter(rows), sch, config, MemoryStore(), RowCodec(sch), led)
        assert in_mem is None
        assert led.rows_spilled == 5000 == seen

    def test_pq_generation_in_memory_at_boundary(self):
        sch = int_schema(1, 10**9)
        rng = random.Random(6)
        config = cfg(128, 16)
        rows = [Row((rng.randrange(10**9),)) for _ in range(128)]
        led = MetricsLedger()
        runs, in_mem, seen = pq_run_generation(
            iter(rows), sch, config, MemoryStore(), RowCodec(sch), led)
        assert runs == [] and led.rows_spilled == 0
        assert [r.key for r in in_mem] == sorted(r.key for r in rows)


class TestPlanMerge:
    def test_many_small_runs_single_wide_step(self):
        # 500 runs of 200k rows, memory 100k, page 1k: all runs in one step
        config = cfg(100_000, 1000)
        plan = plan_merge(fake_runs([200_000] * 500), 8_000_000, config)
        assert plan.levels == 0
        assert [s.kind for s in plan.steps] == ["wide"]
        assert len(plan.steps[0].input_run_ids) == 500

    def test_small_runs_need_one_level_first(self):
        # 376 runs of 2k rows, fan-in 6, output 32k: one full level, then
        # a wide step over the survivors
        config = cfg(1000, 166)
        plan = plan_merge(fake_runs([2000] * 376), 32_000, config)
        assert plan.levels == 1
        assert plan.steps[-1].kind == "wide"
        traditional = [s for s in plan.steps if s.kind == "traditional"]
        assert len(traditional) == 63
        assert all(len(s.input_run_ids) <= 6 for s in traditional)
        assert len(plan.steps[-1].input_run_ids) == 63

    def test_few_runs_below_output_degenerate_final(self):
        config = cfg(1000, 100)
        plan = plan_merge(fake_runs([100] * 4), 10_000, config)
        assert plan.levels == 0
        assert [s.kind for s in plan.steps] == ["traditional"]

    def test_single_run_plans_a_scan(self):
        config = cfg(1000, 100)
        plan = plan_merge(fake_runs([123]), 10_000, config)
        assert [s.kind for s in plan.steps] == ["wide"]


class TestTraditionalMergeStep:
    def _runs(self, schema, key_lists):
        store = MemoryStore()
        codec = RowCodec(schema)
        state = schema.make_state((None,)) if schema.aggregates else ()
        metas = [write_run([Row((k,), state) for k in sorted(lst)], store,
                           codec, 10) for lst in key_lists]
        return store, codec, metas

    def test_collapse_produces_unique_keys(self):
        sch = count_schema()
        store, codec, metas = self._runs(
            sch, [[1, 2, 3], [2, 3, 4], [3, 4, 5]])
        led = MetricsLedger()
        meta, observed = traditional_merge_step(
            metas, sch, cfg(100, 10), store, codec, led,
            collapse=True, level=1)
        assert meta.row_count == 5 == observed
        assert led.merge_steps == 1

    def test_passthrough_keeps_duplicates_but_counts_groups(self):
        sch = count_schema()
        store, codec, metas = self._runs(
            sch, [[1, 2, 3], [2, 3, 4], [3, 4, 5]])
        meta, observed = traditional_merge_step(
            metas, sch, cfg(100, 10), store, codec, MetricsLedger(),
            collapse=False, level=1)
        assert meta.row_count == 9
        assert observed == 5

    def test_disjoint_runs_identity(self):
        sch = count_schema()
        store, codec, metas = self._runs(sch, [[1, 2], [5, 6], [8, 9]])
        meta, observed = traditional_merge_step(
            metas, sch, cfg(100, 10), store, codec, MetricsLedger(),
            collapse=True, level=1)
        assert meta.row_count == 6

    def test_random_runs_match_reference(self):
        sch = count_schema()
        rng = random.Random(7)
        for _ in range(30):
            lists = [[rng.randrange(40) for _ in range(rng.randrange(1, 30))]
                     for _ in range(rng.randrange(2, 6))]
            store = MemoryStore()
            codec = RowCodec(sch)
            state = sch.make_state((None,))
            all_rows = [Row((k,), state) for lst in lists for k in lst]
            metas = []
            for lst in lists:
                agg = {}
                for k in sorted(lst):
                    agg[k] = sch.merge_states(agg[k], state) if k in agg \
                        else state
                metas.append(write_run(
                    [Row((k,), s) for k, s in agg.items()], store, codec, 4))
            meta, _ = traditional_merge_step(
                metas, sch, cfg(100, 10), store, codec, MetricsLedger(),
                collapse=True, level=1)
            from insortagg.runstore import iter_run
            got = [(r.key, tuple(r.state))
                   for r in iter_run(store, codec, meta)]
            want = [(k, tuple(s)) for k, s in reference(all_rows, sch)]
            assert got == want

    def test_fanin_limit_enforced(self):
        sch = count_schema()
        store, codec, metas = self._runs(sch, [[i] for i in range(11)])
        with pytest.raises(Exception):
            traditional_merge_step(metas, sch, cfg(100, 10), store, codec,
                                   MetricsLedger(), collapse=True, level=1)


class TestWideMerge:
    def test_single_run_degenerates_to_scan(self):
        sch = count_schema()
        store = MemoryStore()
        codec = RowCodec(sch)
        state = sch.make_state((None,))
        rows = [Row((k,), state) for k in range(300)]
        meta = write_run(rows, store, codec, 16)
        led = MetricsLedger()
        out, prelims = wide_merge([meta], sch, cfg(100, 10), store, codec,
                                  led, o_est=300)
        assert [r.key for r in out] == [(k,) for k in range(300)]
        assert prelims == 0
        assert led.rows_read_back == 300

    def test_every_page_read_once_no_extra_spill(self):
        sch = count_schema()
        rng = random.Random(8)
        store = MemoryStore()
        codec = RowCodec(sch)
        config = cfg(200, 10)
        state = sch.make_state((None,))
        metas = []
        total_rows = 0
        for _ in range(30):
            keys = sorted({rng.randrange(2000)
                           for _ in range(rng.randrange(30, 80))})
            metas.append(write_run([Row((k,), state) for k in keys],
                                   store, codec, 10))
            total_rows += len(keys)
        led = MetricsLedger()
        out, prelims = wide_merge(metas, sch, config, store, codec, led,
                                  o_est=2000)
        assert prelims == 0
        assert led.rows_spilled == 0
        assert led.rows_read_back == total_rows
        assert led.pages_read == sum(m.page_count for m in metas)
        assert [r.key for r in out] == sorted(r.key for r in out)

    def test_overflow_raises_named_runs_when_not_recovering(self):
        sch = count_schema()
        store = MemoryStore()
        codec = RowCodec(sch)
        state = sch.make_state((None,))
        metas = [write_run([Row((k,), state) for k in range(i, 4000, 17)],
                           store, codec, 10) for i in range(17)]
        with pytest.raises(NeedsPreliminaryMerge) as e:
            wide_merge(metas, sch, cfg(40, 4), store, codec,
                       MetricsLedger(), o_est=30, recover=False)
        assert len(e.value.run_ids) > 0

    def test_overflow_recovers_with_preliminary_merges(self):
        sch = count_schema()
        store = MemoryStore()
        codec = RowCodec(sch)
        state = sch.make_state((None,))
        all_keys = []
        metas = []
        for i in range(17):
            keys = list(range(i, 4000, 17))
            all_keys += keys
            metas.append(write_run([Row((k,), state) for k in keys],
                                   store, codec, 10))
        led = MetricsLedger()
        out, prelims = wide_merge(metas, sch, cfg(40, 4), store, codec, led,
                                  o_est=30, prelim_limit=10)
        assert prelims > 0
        assert [r.key for r in out] == [(k,) for k in sorted(all_keys)]
        assert led.rows_spilled > 0  # index flushes and pre-merges

    def test_budget_exhaustion_reports_planning_failure(self):
        sch = count_schema()
        store = MemoryStore()
        codec = RowCodec(sch)
        state = sch.make_state((None,))
        metas = [write_run([Row((k,), state) for k in range(i, 4000, 17)],
                           store, codec, 10) for i in range(17)]
        with pytest.raises(PlanningError):
            wide_merge(metas, sch, cfg(40, 4), store, codec,
                       MetricsLedger(), o_est=30, prelim_limit=0)


class TestOperatorEndToEnd:
    @pytest.mark.parametrize("mode", [WIDE, TRADITIONAL, SEPARATE])
    @pytest.mark.parametrize("rungen", ["read_sort_write",
                                        REPLACEMENT_SELECTION])
    def test_output_equals_reference_and_sorted(self, mode, rungen):
        sch = count_schema()
        rng = random.Random(hash((mode, rungen)) & 0xFFFF)
        for n, o, m, p in [(3000, 450, 64, 8), (800, 800, 64, 8),
                           (1000, 3, 64, 8), (64, 20, 64, 8)]:
            rows = rows_uniform(rng, n, o, sch)
            op = SortAggregate(
                sch, cfg(m, p, merge_mode=mode, run_generation_mode=rungen),
                MemoryStore())
            out = op.execute(iter(rows))
            assert [(r.key, r.state) for r in out] == reference(rows, sch)
            assert all(out[i - 1].key < out[i].key
                       for i in range(1, len(out)))

    def test_wide_plan_spills_once_and_reads_once(self):
        sch = count_schema()
        rng = random.Random(11)
        rows = rows_uniform(rng, 30_000, 2_500, sch)
        op = SortAggregate(sch, cfg(1000, 10), MemoryStore())
        out = op.execute(iter(rows))
        led = op.ledger
        assert [s.kind for s in op.initial_plan.steps] == ["wide"]
        assert op.executed_steps[-1]["kind"] == "wide"
        # zero traditional levels: spilled exactly the initial runs, read
        # back exactly once
        assert led.rows_spilled == led.rows_read_back
        led.check_invariants()

    def test_ovc_on_off_identical_results(self):
        sch = count_schema(3, 12)
        rng = random.Random(12)
        keys = [(rng.randrange(12), rng.randrange(12), rng.randrange(12))
                for _ in range(3000)]
        state = sch.make_state((None,))
        rows = [Row(k, state) for k in keys]
        outs = []
        for ovc_flag in (True, False):
            op = SortAggregate(sch, cfg(64, 8, ovc_enabled=ovc_flag),
                               MemoryStore())
            outs.append([(r.key, r.state)
                         for r in op.execute(iter(list(rows)))])
        assert outs[0] == outs[1]

    def test_interpolation_flag_same_output(self):
        sch = count_schema()
        rng = random.Random(13)
        rows = rows_uniform(rng, 2000, 700, sch)
        a = SortAggregate(sch, cfg(64, 8), MemoryStore()) \
            .execute(iter(list(rows)))
        b = SortAggregate(sch, cfg(64, 8, interpolation_search=True),
                          MemoryStore()).execute(iter(list(rows)))
        assert [(r.key, r.state) for r in a] == [(r.key, r.state) for r in b]

    def test_wide_recovery_inside_operator_with_bad_hint(self):
        # an adversarial hint forces the wide merge to start too early;
        # the operator recovers and the output is still exact
        sch = count_schema()
        rng = random.Random(14)
        rows = rows_uniform(rng, 6000, 3000, sch)
        op = SortAggregate(
            sch, cfg(64, 4, output_size_hint=70, max_preliminary_merges=50),
            MemoryStore())
        out = op.execute(iter(rows))
        assert [(r.key, r.state) for r in out] == reference(rows, sch)

    def test_empty_input(self):
        sch = count_schema()
        op = SortAggregate(sch, cfg(64, 8), MemoryStore())
        assert op.execute(iter([])) == []
        assert op.ledger.rows_spilled == 0


class TestOutputEstimator:
    def test_steady_probe_estimate(self):
        est = OutputEstimator(1000)
        rng = random.Random(15)
        o = 4000
        for _ in range(50_000):
            est.note_steady_probe(1000, rng.random() < 1000 / o)
        assert abs(est.estimate(10**9) - o) / o < 0.05

    def test_cycle_inversion(self):
        import math
        est = OutputEstimator(1000)
        o = 8000
        consumed = o * math.log(o / (o - 1000))
        for _ in range(10):
            est.note_cycle(round(consumed))
        got = est.estimate(10**9)
        assert abs(got - o) / o < 0.02

    def test_no_absorption_means_distinct_input(self):
        est = OutputEstimator(1000)
        for _ in range(200):
            est.note_steady_probe(1000, False)
        assert est.estimate(123_456) == 123_456

    def test_observations_lift_the_floor(self):
        est = OutputEstimator(1000)
        est.observe_distinct(777)
        assert est.estimate(10_000) == 777
