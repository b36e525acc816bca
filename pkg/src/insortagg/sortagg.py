"""Sort-based duplicate removal, grouping, and aggregation.

One operator, three merge modes:

* ``wide`` (default): run generation absorbs duplicates in an ordered
  in-memory index; merging runs traditional levels only until the smallest
  runs collectively cover the output, then one final wide merge step consumes
  every remaining run through a single shared input buffer, aggregating into
  the index and emitting finalized rows as the merge frontier advances.
* ``traditional``: priority-queue run generation (no early absorption) and
  traditional merge levels; a merge step collapses duplicates only when its
  combined input is at least the output-size estimate, which is when
  collapsing actually reduces the data volume.
* ``separate``: plain external sort; duplicates survive every merge level and
  are collapsed only in the final output stream.

The operator never learns the true output size.  It maintains a running
estimate from the absorb rate while memory is full (replacement selection),
from the fill-cycle lengths (read-sort-write), from distinct counts observed
while merging, and from run sizes; a wrong estimate at the wide-merge
admission test is recovered by flushing the index and pre-merging the
smallest runs, after which the wide merge resumes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

from . import ovc as _ovc
from .core import (
    ContractViolationError,
    EngineError,
    InvalidInputError,
    MetricsLedger,
    PlanningError,
    Row,
    compare_rows,
)
from .losertree import LoserTree
from .memindex import InsertOutcome, OrderedIndex
from .runstore import RowCodec, RunWriter, iter_run, read_page

WIDE = "wide"
TRADITIONAL = "traditional"
SEPARATE = "separate"

READ_SORT_WRITE = "read_sort_write"
REPLACEMENT_SELECTION = "replacement_selection"


@dataclass
class SortAggConfig:
    memory_budget: int
    page_capacity: int
    run_generation_mode: str = READ_SORT_WRITE
    merge_mode: str = WIDE
    ovc_enabled: bool = True
    ovc_cache: bool = True
    ovc_direction: str = _ovc.ASCENDING
    interpolation_search: bool = False
    batch_size: int = 1
    leaf_capacity: int = 64
    eviction_chunk: int | None = None
    output_size_hint: int | None = None
    max_preliminary_merges: int | None = None

    def __post_init__(self):
        if self.page_capacity < 1:
            raise InvalidInputError("page capacity must be positive")
        if self.memory_budget < 2 * self.page_capacity:
            raise InvalidInputError("memory budget must cover two pages")
        if self.max_fanin < 2:
            raise InvalidInputError("fan-in must be at least 2")
        if self.run_generation_mode not in (READ_SORT_WRITE,
                                            REPLACEMENT_SELECTION):
            raise InvalidInputError(
                f"unknown run generation mode {self.run_generation_mode!r}")
        if self.merge_mode not in (WIDE, TRADITIONAL, SEPARATE):
            raise InvalidInputError(
                f"unknown merge mode {self.merge_mode!r}")

    @property
    def max_fanin(self):
        return self.memory_budget // self.page_capacity


class OutputEstimator:
    """Running estimate of the distinct-key count (output size).

    Lower bounds come from run sizes and distinct counts observed in merge
    streams.  Run generation adds a statistical estimate: with memory full
    under replacement selection the absorb probability is budget/output, and
    under read-sort-write the mean fill-cycle length determines the output
    size through C = O * ln(O / (O - M)).
    """

    def __init__(self, budget):
        self.budget = budget
        self.steady_probes = 0
        self.steady_absorbs = 0
        self.steady_resident_sum = 0
        self.cycles = []
        self.observed = 1
        self.max_run_rows = 0

    def note_steady_probe(self, resident, absorbed):
        # absorb probability at residency r is r / output-size, so the
        # output size is estimated by sum(r) / absorbs
        self.steady_probes += 1
        self.steady_resident_sum += resident
        if absorbed:
            self.steady_absorbs += 1

    def note_cycle(self, consumed):
        if consumed > 0:
            self.cycles.append(consumed)

    def observe_distinct(self, count):
        if count > self.observed:
            self.observed = count

    def note_runs(self, metas):
        for m in metas:
            if m.row_count > self.max_run_rows:
                self.max_run_rows = m.row_count

    def _invert_cycle(self, mean_c, rows_seen):
        m = self.budget
        if mean_c <= m * (1 + 1e-9):
            return rows_seen
        lo, hi = m * (1 + 1e-12), float(m) * 2
        while hi * math.log(hi / (hi - m)) > mean_c:
            hi *= 2
            if hi > 1e18:
                return rows_seen
        for _ in range(80):
            mid = (lo + hi) / 2
            if mid * math.log(mid / (mid - m)) > mean_c:
                lo = mid
            else:
                hi = mid
        return (lo + hi) / 2

    def estimate(self, rows_seen):
        candidates = [self.observed, self.max_run_rows, 1]
        if self.steady_probes >= 100:
            if self.steady_absorbs:
                candidates.append(
                    self.steady_resident_sum / self.steady_absorbs)
            else:
                candidates.append(rows_seen)
        if self.cycles:
            mean_c = sum(self.cycles) / len(self.cycles)
            candidates.append(self._invert_cycle(mean_c, rows_seen))
        est = max(candidates)
        if rows_seen:
            est = min(est, rows_seen)
        return max(1, int(est))


# ---------------------------------------------------------------------------
# comparison helpers shared by merge and collapse paths
# ---------------------------------------------------------------------------

def _comparator(schema, config, ledger):
    if config.ovc_enabled and schema.ovc_prefix > 0:
        direction, cache = config.ovc_direction, config.ovc_cache

        def cmp(a, b):
            return _ovc.ladder_compare(a, b, direction, schema, ledger,
                                       use_cache=cache)[0]
    else:

        def cmp(a, b):
            return compare_rows(a, b, schema, ledger)[0]

    return cmp


class _SortKey:
    """Comparison-charging sort key for batch pre-sorting."""

    __slots__ = ("row", "cmp")

    def __init__(self, row, cmp):
        self.row = row
        self.cmp = cmp

    def __lt__(self, other):
        return self.cmp(self.row, other.row) < 0


def _batch_rows(rows, schema, config, ledger):
    """Optional batch preprocessing: sort each input batch and aggregate
    duplicates within it before the rows reach the index."""
    size = config.batch_size
    if size <= 1:
        yield from rows
        return
    cmp = _comparator(schema, config, ledger)
    merge = schema.merge_states
    buf = []
    for row in rows:
        buf.append(row)
        if len(buf) >= size:
            yield from _collapse_sorted_batch(buf, cmp, merge)
            buf = []
    if buf:
        yield from _collapse_sorted_batch(buf, cmp, merge)


def _collapse_sorted_batch(batch, cmp, merge):
    batch.sort(key=lambda r: _SortKey(r, cmp))
    acc = batch[0]
    owned = False
    for row in batch[1:]:
        if cmp(acc, row) == 0:
            if not owned:
                acc = Row(acc.key, acc.state, acc.ovc)
                owned = True
            acc.state = merge(acc.state, row.state)
        else:
            yield acc
            acc = row
            owned = False
    yield acc


def collapse_stream(rows, schema, config, ledger):
    """Aggregate adjacent equal keys of a sorted stream (in-stream logic)."""
    cmp = _comparator(schema, config, ledger)
    merge = schema.merge_states
    acc = None
    owned = False
    for row in rows:
        if acc is None:
            acc = row
            owned = False
        elif cmp(acc, row) == 0:
            if not owned:
                acc = Row(acc.key, acc.state, acc.ovc)
                owned = True
            acc.state = merge(acc.state, row.state)
        else:
            yield acc
            acc = row
            owned = False
    if acc is not None:
        yield acc


def merge_streams(iters, schema, config, ledger):
    """Tournament merge of sorted row streams.

    With offset-value coding enabled, each stream's rows enter coded
    relative to their in-run predecessor (stream heads relative to the low
    sentinel); code comparisons decide matches without column accesses and
    ties re-base the loser against the winner.
    """
    use_ovc = config.ovc_enabled and schema.ovc_prefix > 0
    tree = LoserTree(len(iters), schema, ledger, use_ovc=use_ovc,
                     direction=config.ovc_direction, classic_codes=True,
                     ovc_cache=config.ovc_cache)
    direction, cache = config.ovc_direction, config.ovc_cache
    entries = []
    for it in iters:
        row = next(it, None)
        if row is None:
            entries.append(None)
        elif use_ovc:
            code = _ovc.encode(row, None, direction, schema, ledger, cache)
            entries.append((0, row, code))
        else:
            entries.append((0, row, None))
    tree.build(entries)
    while True:
        slot = tree.winner_slot()
        entry = tree.winner()
        if entry is None:
            break
        row = entry[1]
        nxt = next(iters[slot], None)
        if nxt is None:
            new_entry = None
        elif use_ovc:
            code = _ovc.encode(nxt, row, direction, schema, ledger, cache)
            new_entry = (0, nxt, code)
        else:
            new_entry = (0, nxt, None)
        tree.push_and_pop(new_entry)
        yield row


# ---------------------------------------------------------------------------
# run generation
# ---------------------------------------------------------------------------

def index_run_generation(rows, schema, config, store, codec, ledger):
    """Early-aggregating run generation through the ordered index.

    Returns ``(run_metas, index, estimator, rows_seen)``.  If the distinct
    keys fit in the budget, no runs are produced and the index holds the
    full output; otherwise the index is fully drained into runs.
    """
    rs = config.run_generation_mode == REPLACEMENT_SELECTION
    budget = config.memory_budget
    index = OrderedIndex(budget, schema.merge_states, ledger,
                         leaf_capacity=config.leaf_capacity,
                         interpolation=config.interpolation_search,
                         generations=rs)
    est = OutputEstimator(budget)
    chunk = config.eviction_chunk or config.page_capacity
    runs = []
    writer = None  # open run being evicted into (replacement selection)
    rows_seen = 0
    consumed = 0  # rows since the last read-sort-write flush

    def new_writer():
        return RunWriter(store, codec, config.page_capacity, ledger,
                         level=0, strict_unique=True)

    spilling = False
    for row in _batch_rows(rows, schema, config, ledger):
        rows_seen += 1
        consumed += 1
        resident = index.resident_rows
        outcome = index.insert_or_aggregate(row.key, row.state)
        if rs and spilling:
            est.note_steady_probe(resident,
                                  outcome is InsertOutcome.ABSORBED)
        while outcome is InsertOutcome.NEEDS_EVICTION:
            spilling = True
            if rs:
                if writer is None:
                    writer = new_writer()
                for key, state in index.evict_range(chunk):
                    writer.add(Row(key, state))
                if index.current_generation_empty():
                    runs.append(writer.close())
                    writer = None
                    index.advance_generation()
            else:
                est.note_cycle(consumed - 1)
                consumed = 1
                flush_writer = new_writer()
                for key, state in index.evict_all():
                    flush_writer.add(Row(key, state))
                runs.append(flush_writer.close())
            outcome = index.insert_or_aggregate(row.key, row.state)

    spilled = bool(runs) or writer is not None
    if spilled:
        # drain the residue so runs hold the complete aggregated data
        if rs:
            while True:
                if not index.current_generation_empty():
                    if writer is None:
                        writer = new_writer()
                    for key, state in index.evict_range(chunk):
                        writer.add(Row(key, state))
                    continue
                if writer is not None:
                    runs.append(writer.close())
                    writer = None
                if index.resident_rows == 0:
                    break
                index.advance_generation()
        elif index.resident_rows:
            flush_writer = new_writer()
            for key, state in index.evict_all():
                flush_writer.add(Row(key, state))
            runs.append(flush_writer.close())
    est.note_runs(runs)
    return runs, index, est, rows_seen


def pq_run_generation(rows, schema, config, store, codec, ledger):
    """Priority-queue run generation without early aggregation.

    Replacement selection tags each incoming row with a run number (one
    extra comparison against the last row written) and produces runs about
    twice the memory size; read-sort-write fills memory, drains it as one
    run, and repeats.  Returns ``(run_metas, in_memory_rows, rows_seen)``;
    ``in_memory_rows`` is the sorted input when it fit in memory and nothing
    was spilled.
    """
    budget = config.memory_budget
    use_ovc = config.ovc_enabled and schema.ovc_prefix > 0
    tree = LoserTree(budget, schema, ledger, use_ovc=use_ovc,
                     direction=config.ovc_direction, classic_codes=False,
                     ovc_cache=config.ovc_cache)
    cmp = _comparator(schema, config, ledger)
    it = iter(rows)
    first = list(itertools.islice(it, budget + 1))
    rows_seen = len(first)
    if len(first) <= budget:
        # entire input fits in memory: sort through the tree, no spilling
        tree.build([(0, r, None) for r in first])
        out = []
        for _ in range(len(first)):
            out.append(tree.push_and_pop(None)[1])
        return [], out, rows_seen

    runs = []
    rs = config.run_generation_mode == REPLACEMENT_SELECTION
    if rs:
        tree.build([(0, r, None) for r in first[:budget]])
        live = budget
        writer = RunWriter(store, codec, config.page_capacity, ledger,
                           level=0)
        current = 0

        def emit(popped):
            nonlocal writer, current
            cohort, prow = popped[0], popped[1]
            if cohort > current:
                runs.append(writer.close())
                writer = RunWriter(store, codec, config.page_capacity,
                                   ledger, level=0)
                current = cohort
            writer.add(prow)

        for row in itertools.chain(first[budget:], it):
            rows_seen += 1
            # the incoming row joins the run of the row being popped now if
            # it can still be written behind it, else the following run
            winner = tree.winner()
            if cmp(row, winner[1]) >= 0:
                cohort = winner[0]
            else:
                cohort = winner[0] + 1
            emit(tree.push_and_pop((cohort, row, None)))
        rows_seen -= 1  # the probe row beyond the fill was counted once
        while live:
            popped = tree.push_and_pop(None)
            if popped is not None:
                emit(popped)
                live -= 1
        runs.append(writer.close())
    else:
        fill = first[:budget]
        it = itertools.chain(first[budget:], it)
        while fill:
            tree.build([(0, r, None) for r in fill])
            writer = RunWriter(store, codec, config.page_capacity, ledger,
                               level=0)
            for _ in range(len(fill)):
                writer.add(tree.push_and_pop(None)[1])
            runs.append(writer.close())
            fill = list(itertools.islice(it, budget))
            rows_seen += len(fill)
        rows_seen -= 1  # the probe row beyond the first fill was re-counted
    return runs, None, rows_seen


# ---------------------------------------------------------------------------
# merge planning and merge steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanStep:
    kind: str  # "traditional" | "wide"
    input_run_ids: tuple
    expected_output_rows: int


@dataclass(frozen=True)
class MergePlan:
    steps: tuple
    levels: int

    @property
    def wide_steps(self):
        return sum(1 for s in self.steps if s.kind == "wide")


def _wide_applicable(sizes, o_est, config):
    """Admission test for the final wide merge step.

    All remaining runs can be consumed at once when a merge at the regular
    fan-in already covers the whole output (extra inputs cannot grow the
    result), and when the key range of one page fits the index budget:
    candidate rows resident at any moment are roughly the output density
    times one page's share of a typical run.
    """
    if len(sizes) == 1:
        return True
    fan = config.max_fanin
    smallest = sorted(sizes)[:fan]
    if sum(smallest) < o_est:
        return False
    budget = config.memory_budget - 2 * config.page_capacity
    if budget < 1:
        return False
    median = sorted(sizes)[len(sizes) // 2]
    resident_estimate = o_est * config.page_capacity / max(1, median)
    return resident_estimate <= budget


def plan_merge(runs, o_est, config):
    """Plan the merge phase for the given runs and output-size estimate.

    Traditional levels (fan-in limited, smallest runs first) are planned
    only while the smallest runs together stay below the output estimate;
    the final step is a wide merge over all survivors whenever the admission
    test passes, or a single traditional merge when few enough runs remain.
    """
    if not runs:
        raise InvalidInputError("cannot plan a merge without runs")
    o_est = max(1, int(o_est))
    fan = config.max_fanin
    pool = sorted(((m.row_count, m.run_id) for m in runs))
    steps = []
    levels = 0
    synthetic = 0
    while True:
        sizes = [p[0] for p in pool]
        if _wide_applicable(sizes, o_est, config):
            steps.append(PlanStep("wide", tuple(p[1] for p in pool),
                                  min(sum(sizes), o_est)))
            break
        if len(pool) <= fan:
            steps.append(PlanStep("traditional", tuple(p[1] for p in pool),
                                  min(sum(sizes), o_est)))
            break
        levels += 1
        nxt = []
        for i in range(0, len(pool), fan):
            group = pool[i:i + fan]
            if len(group) == 1:
                nxt.append(group[0])
                continue
            total = sum(g[0] for g in group)
            out_rows = min(total, o_est) if total >= o_est else total
            synthetic += 1
            steps.append(PlanStep("traditional",
                                  tuple(g[1] for g in group), out_rows))
            nxt.append((out_rows, f"planned-{synthetic}"))
        pool = sorted(nxt)
    return MergePlan(tuple(steps), levels)


def traditional_merge_step(metas, schema, config, store, codec, ledger, *,
                           collapse, level):
    """Merge up to fan-in runs into one output run.

    With ``collapse`` the output run is unique-keyed (states merged);
    without it the rows pass through unchanged, which is the right choice
    while the combined input is smaller than the operation's output.
    Returns ``(meta, distinct_groups_observed)``.
    """
    if len(metas) > config.max_fanin:
        raise ContractViolationError(
            f"merge fan-in {len(metas)} exceeds limit {config.max_fanin}")
    iters = [iter_run(store, codec, m, ledger) for m in metas]
    merged = merge_streams(iters, schema, config, ledger)
    writer = RunWriter(store, codec, config.page_capacity, ledger,
                       level=level, strict_unique=collapse)
    observed = 0
    if collapse:
        for row in collapse_stream(merged, schema, config, ledger):
            writer.add(row)
            observed += 1
    else:
        prev_key = None
        for row in merged:
            if row.key != prev_key:  # estimator bookkeeping, uncharged
                observed += 1
                prev_key = row.key
            writer.add(row)
    ledger.merge_steps += 1
    return writer.close(), observed


class NeedsPreliminaryMerge(EngineError):
    """The wide-merge index hit its budget; the named smallest runs must be
    pre-merged before wide merging can absorb all rows."""

    def __init__(self, run_ids):
        super().__init__(
            "wide merge cannot absorb all rows within its memory budget; "
            f"pre-merge the smallest runs {sorted(run_ids)}")
        self.run_ids = tuple(run_ids)


def wide_merge(metas, schema, config, store, codec, ledger, *, o_est,
               estimator=None, prelim_limit=3, recover=True):
    """Final merge step over any number of runs with one shared buffer page.

    A forecasting priority queue tracks, per run, the highest key already
    read; each iteration reads the next page of the run with the lowest such
    key, absorbs the page's rows into the ordered index, and emits rows with
    keys strictly below the new lowest frontier: those can receive no
    further contributions and are final.

    If the index budget overflows (the admission estimate was wrong), the
    index contents are flushed as an extra run, the smallest remaining runs
    are pre-merged to raise page key density, and the merge resumes; rows
    already emitted stay final.  After ``prelim_limit`` recoveries the
    operator reports a planning failure.
    """
    budget = config.memory_budget - 2 * config.page_capacity
    if budget < 1:
        raise InvalidInputError("memory budget too small for wide merging")
    index = OrderedIndex(budget, schema.merge_states, ledger,
                         leaf_capacity=config.leaf_capacity,
                         interpolation=config.interpolation_search)
    output = []
    active = {m.run_id: m for m in metas}
    position = {m.run_id: 0 for m in metas}    # next page to read
    consumed = {m.run_id: 0 for m in metas}    # rows already read
    priority = {m.run_id: m.min_key for m in metas}  # highest key read
    prelims = 0
    max_level = max(m.level for m in metas)

    def build_tree():
        ids = sorted(active)
        tree = LoserTree(len(ids), schema, ledger)
        tree.build([(0, Row(priority[rid]), None) for rid in ids])
        return ids, tree

    slot_ids, tree = build_tree()

    while active:
        slot = tree.winner_slot()
        rid = slot_ids[slot]
        meta = active[rid]
        page_rows = read_page(store, codec, meta, position[rid], ledger)
        position[rid] += 1
        consumed[rid] += len(page_rows)
        rebuild = False
        for row in page_rows:
            while index.insert_or_aggregate(row.key, row.state) \
                    is InsertOutcome.NEEDS_EVICTION:
                if not recover:
                    smallest = sorted(
                        active.values(),
                        key=lambda m: m.row_count - consumed[m.run_id])
                    raise NeedsPreliminaryMerge(
                        [m.run_id for m in smallest[:config.max_fanin]])
                prelims += 1
                if prelims > prelim_limit:
                    raise PlanningError(
                        "wide merge exceeded its preliminary-merge budget; "
                        "output-size estimate is unusable")
                max_level += 1
                _recover_wide_merge(
                    index, rid, active, position, consumed, priority,
                    schema, config, store, codec, ledger,
                    level=max_level, output_so_far=len(output),
                    estimator=estimator, o_est=o_est)
                rebuild = True
        priority[rid] = page_rows[-1].key
        exhausted = position[rid] >= meta.page_count
        if exhausted:
            del active[rid]
            del position[rid], consumed[rid], priority[rid]
        if rebuild:
            if not active:
                break
            slot_ids, tree = build_tree()
        else:
            entry = None if exhausted else (0, Row(priority[rid]), None)
            tree.push_and_pop(entry)
        watermark = tree.winner()
        if watermark is not None:
            for key, state in index.pop_finalized_below(watermark[1].key):
                output.append(Row(key, state))
    for key, state in index.evict_all():
        output.append(Row(key, state))
    ledger.merge_steps += 1
    return output, prelims


def _recover_wide_merge(index, current_rid, active, position, consumed,
                        priority, schema, config, store, codec, ledger, *,
                        level, output_so_far, estimator, o_est):
    """Pang-style interruption: flush the index into a run, pre-merge the
    smallest remaining runs' unread suffixes, and let the caller resume."""
    flushed = index.evict_all()
    flush_writer = RunWriter(store, codec, config.page_capacity, ledger,
                             level=level, strict_unique=True)
    for key, state in flushed:
        flush_writer.add(Row(key, state))
    flush_meta = flush_writer.close()
    if estimator is not None:
        estimator.observe_distinct(output_so_far + len(flushed))
    candidates = sorted(
        (m for m in active.values() if m.run_id != current_rid),
        key=lambda m: m.row_count - consumed[m.run_id])
    chosen = candidates[:config.max_fanin]
    new_meta = None
    if len(chosen) >= 2:
        iters = [iter_run(store, codec, m, ledger,
                          start_page=position[m.run_id]) for m in chosen]
        merged = merge_streams(iters, schema, config, ledger)
        remaining = sum(m.row_count - consumed[m.run_id] for m in chosen)
        writer = RunWriter(store, codec, config.page_capacity, ledger,
                           level=level, strict_unique=(remaining >= o_est))
        if remaining >= o_est:
            for row in collapse_stream(merged, schema, config, ledger):
                writer.add(row)
        else:
            for row in merged:
                writer.add(row)
        ledger.merge_steps += 1
        new_meta = writer.close()
        for m in chosen:
            del active[m.run_id], position[m.run_id]
            del consumed[m.run_id], priority[m.run_id]
    for meta in (flush_meta, new_meta):
        if meta is not None:
            active[meta.run_id] = meta
            position[meta.run_id] = 0
            consumed[meta.run_id] = 0
            priority[meta.run_id] = meta.min_key


# ---------------------------------------------------------------------------
# the operator
# ---------------------------------------------------------------------------

class SortAggregate:
    """Single-threaded sort-based aggregation operator.

    ``execute`` consumes an unsorted row stream and returns the aggregated
    rows in ascending key order.  Metrics accumulate in ``self.ledger``;
    ``self.initial_plan`` and ``self.executed_steps`` expose the merge
    schedule for inspection.
    """

    def __init__(self, schema, config, store, ledger=None):
        self.schema = schema
        self.config = config
        self.store = store
        self.ledger = ledger if ledger is not None else MetricsLedger()
        self.codec = RowCodec(schema)
        self.initial_plan = None
        self.executed_steps = []
        self.runs_after_generation = 0

    def execute(self, rows):
        if self.config.merge_mode == WIDE:
            return self._execute_wide(rows)
        return self._execute_pq(rows)

    # -- new in-sort aggregation ---------------------------------------

    def _execute_wide(self, rows):
        cfg, ledger = self.config, self.ledger
        runs, index, est, seen = index_run_generation(
            rows, self.schema, cfg, self.store, self.codec, ledger)
        self.runs_after_generation = len(runs)
        if not runs:
            return [Row(k, s) for k, s in index.evict_all()]

        def current_estimate():
            if cfg.output_size_hint is not None:
                return cfg.output_size_hint
            return est.estimate(seen)

        self.initial_plan = plan_merge(runs, current_estimate(), cfg)
        prelim_limit = (cfg.max_preliminary_merges
                        if cfg.max_preliminary_merges is not None
                        else self.initial_plan.levels + 2)
        pool = runs
        while True:
            o_est = current_estimate()
            sizes = [m.row_count for m in pool]
            if _wide_applicable(sizes, o_est, cfg):
                output, prelims = wide_merge(
                    pool, self.schema, cfg, self.store, self.codec, ledger,
                    o_est=o_est, estimator=est, prelim_limit=prelim_limit)
                ledger.merge_levels += 1
                self.executed_steps.append(
                    {"kind": "wide", "fan_in": len(pool),
                     "rows_out": len(output),
                     "preliminary_merges": prelims})
                return output
            if len(pool) <= cfg.max_fanin:
                return self._final_traditional(pool)
            pool = self._run_level(pool, o_est, est)

    # -- traditional / separate sort pipelines --------------------------

    def _execute_pq(self, rows):
        cfg, ledger = self.config, self.ledger
        runs, in_memory, seen = pq_run_generation(
            rows, self.schema, cfg, self.store, self.codec, ledger)
        self.runs_after_generation = len(runs)
        if in_memory is not None:
            return list(collapse_stream(iter(in_memory), self.schema, cfg,
                                        ledger))
        est = OutputEstimator(cfg.memory_budget)
        est.note_runs(runs)

        def current_estimate():
            if cfg.output_size_hint is not None:
                return cfg.output_size_hint
            return est.estimate(seen)

        self.initial_plan = plan_merge(runs, current_estimate(), cfg) \
            if cfg.merge_mode == TRADITIONAL else None
        pool = runs
        while len(pool) > cfg.max_fanin:
            pool = self._run_level(pool, current_estimate(), est)
        return self._final_traditional(pool)

    # -- shared pieces ---------------------------------------------------

    def _run_level(self, pool, o_est, est):
        """One full traditional merge level: groups of the smallest runs."""
        cfg, ledger = self.config, self.ledger
        collapse_allowed = cfg.merge_mode != SEPARATE
        ordered = sorted(pool, key=lambda m: m.row_count)
        level_no = max(m.level for m in ordered) + 1
        nxt = []
        for i in range(0, len(ordered), cfg.max_fanin):
            group = ordered[i:i + cfg.max_fanin]
            if len(group) == 1:
                nxt.append(group[0])
                continue
            total = sum(m.row_count for m in group)
            collapse = collapse_allowed and total >= o_est
            meta, observed = traditional_merge_step(
                group, self.schema, cfg, self.store, self.codec, ledger,
                collapse=collapse, level=level_no)
            est.observe_distinct(observed)
            self.executed_steps.append(
                {"kind": "traditional", "fan_in": len(group),
                 "rows_in": total, "rows_out": meta.row_count,
                 "collapsed": collapse, "level": level_no})
            nxt.append(meta)
        ledger.merge_levels += 1
        return nxt

    def _final_traditional(self, pool):
        """Final merge of at most fan-in runs, aggregating into the output."""
        cfg, ledger = self.config, self.ledger
        iters = [iter_run(self.store, self.codec, m, ledger) for m in pool]
        merged = merge_streams(iters, self.schema, cfg, ledger)
        output = list(collapse_stream(merged, self.schema, cfg, ledger))
        ledger.merge_steps += 1
        ledger.merge_levels += 1
        self.executed_steps.append(
            {"kind": "final", "fan_in": len(pool), "rows_out": len(output)})
        return output
