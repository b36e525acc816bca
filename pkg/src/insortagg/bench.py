"""Benchmark harness: dataset generation, scenario execution, reporting.

A scenario bundles a deterministic dataset generator, one operator with its
configuration, and optional expectations on the measured metrics.  Running a
scenario always verifies the operator's output against an independent
reference aggregation (order-independent checksum) before any metric is
reported; a correctness mismatch is a hard failure.

Also houses the sorted-input fast path (in-stream aggregation), the
operator-selection rules, and the set-intersection plans used to compare
sort- against hash-based execution of two-input queries.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import costmodel
from .core import (
    AggregateKind,
    AggregateSpec,
    ColumnSpec,
    INT64,
    InvalidInputError,
    MetricsLedger,
    Row,
    Schema,
)
from .hashagg import HashAggConfig, HashAggregate, hash_uniform
from .runstore import FileStore, MemoryStore, RowCodec
from .sortagg import (
    REPLACEMENT_SELECTION,
    SEPARATE,
    SortAggConfig,
    SortAggregate,
    TRADITIONAL,
    WIDE,
    index_run_generation,
)

DISTRIBUTIONS = ("uniform", "zipf", "unique_first_column",
                 "diff_last_column_only", "table3_stream")

_TABLE3_ROWS = [(5, 7, 3, 9), (5, 7, 3, 12), (5, 8, 4, 6), (5, 9, 2, 7),
                (5, 9, 2, 7), (5, 9, 3, 4), (5, 9, 3, 7)]

_AGG_BY_NAME = {
    "count": AggregateKind.COUNT,
    "sum": AggregateKind.SUM,
    "min": AggregateKind.MIN,
    "max": AggregateKind.MAX,
    "avg": AggregateKind.AVG,
}


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    rows: int
    distinct: int
    distribution: str = "uniform"
    columns: int = 1
    domain: int | None = None
    zipf_s: float = 1.2
    payload: bool = False
    aggregates: str = ""  # comma-separated kinds, e.g. "count,sum,avg"
    seed: int = 0

    def column_domain(self):
        if self.domain is not None:
            return self.domain
        if self.distribution == "table3_stream":
            return 100
        if self.distribution in ("unique_first_column",
                                 "diff_last_column_only"):
            need = self.rows
        else:
            need = self.distinct
        if self.columns == 1:
            return max(100, need)
        d = max(2, int(round(need ** (1.0 / self.columns))))
        while d ** self.columns < need:
            d += 1
        return max(100, d)

    def aggregate_specs(self):
        specs = []
        for i, name in enumerate(n for n in self.aggregates.split(",") if n):
            kind = _AGG_BY_NAME.get(name.strip())
            if kind is None:
                raise InvalidInputError(f"unknown aggregate {name!r}")
            specs.append(AggregateSpec(f"a{i}_{name.strip()}", kind,
                                       "payload"))
        return tuple(specs)


def build_schema(spec):
    d = spec.column_domain()
    cols = [ColumnSpec(f"k{i}", INT64, d) for i in range(spec.columns)]
    return Schema(cols, spec.aggregate_specs())


def generate(spec, schema=None):
    """Produce exactly ``rows`` rows with exactly ``distinct`` keys,
    bit-deterministic under the seed.  Returns ``(schema, rows)``."""
    if spec.distribution not in DISTRIBUTIONS:
        raise InvalidInputError(f"unknown distribution {spec.distribution!r}")
    sch = schema if schema is not None else build_schema(spec)
    if spec.distribution == "table3_stream":
        return sch, [Row(k) for k in _TABLE3_ROWS]
    if spec.distinct > spec.rows:
        raise InvalidInputError("cannot have more distinct keys than rows")
    if spec.rows == 0:
        return sch, []
    d = sch.key_columns[0].domain
    if d ** sch.arity < spec.distinct:
        raise InvalidInputError("key domain cannot hold the distinct count")
    rng = np.random.default_rng(spec.seed)
    k = sch.arity
    n = spec.rows

    if spec.distribution == "unique_first_column":
        if spec.distinct != n:
            raise InvalidInputError(
                "unique_first_column requires distinct == rows")
        cols = [rng.permutation(n).astype(np.int64)]
        cols += [rng.integers(0, d, n, dtype=np.int64) for _ in range(k - 1)]
    elif spec.distribution == "diff_last_column_only":
        if spec.distinct != n:
            raise InvalidInputError(
                "diff_last_column_only requires distinct == rows")
        cols = [np.zeros(n, dtype=np.int64) for _ in range(k - 1)]
        cols += [rng.permutation(n).astype(np.int64)]
    else:
        if spec.distribution == "uniform":
            extra = rng.integers(0, spec.distinct, n - spec.distinct,
                                 dtype=np.int64)
        else:  # zipf: rank probabilities proportional to 1/rank^s
            ranks = np.arange(1, spec.distinct + 1, dtype=np.float64)
            p = ranks ** -spec.zipf_s
            p /= p.sum()
            extra = rng.choice(spec.distinct, n - spec.distinct,
                               p=p).astype(np.int64)
        # every key planted once guarantees the exact distinct count
        ids = np.concatenate(
            [np.arange(spec.distinct, dtype=np.int64), extra])
        rng.shuffle(ids)
        cols = []
        rem = ids
        for j in range(k):  # mixed radix, most-significant column first
            div = d ** (k - 1 - j)
            cols.append((rem // div).astype(np.int64))
            rem = rem % div

    col_lists = [c.tolist() for c in cols]
    n_aggs = len(sch.aggregates)
    payload = (rng.integers(0, 1000, n, dtype=np.int64).tolist()
               if n_aggs and spec.payload else None)
    make_state = sch.make_state
    rows = []
    append = rows.append
    if k == 1:
        keys = [(v,) for v in col_lists[0]]
    else:
        keys = list(zip(*col_lists))
    if n_aggs:
        for i, key in enumerate(keys):
            v = payload[i] if payload is not None else 1
            append(Row(key, make_state((v,) * n_aggs)))
    else:
        for key in keys:
            append(Row(key))
    return sch, rows


# ---------------------------------------------------------------------------
# oracles and decision rules
# ---------------------------------------------------------------------------

def reference_aggregate(rows, schema):
    """Independent oracle: hash-map aggregation, output sorted by key."""
    table = {}
    merge = schema.merge_states
    for row in rows:
        cur = table.get(row.key)
        table[row.key] = row.state if cur is None else merge(cur, row.state)
    return [Row(k, s) for k, s in sorted(table.items())]


def in_stream_aggregate(sorted_rows, schema):
    """Aggregation over an input already sorted on the grouping key."""
    merge = schema.merge_states
    acc = None
    for row in sorted_rows:
        if acc is None:
            acc = Row(row.key, row.state)
        elif row.key == acc.key:
            acc.state = merge(acc.state, row.state)
        else:
            yield acc
            acc = Row(row.key, row.state)
    if acc is not None:
        yield acc


def choose_operator(input_sorted):
    """Two-row decision rule: sorted inputs aggregate in-stream, everything
    else goes to the new in-sort operator."""
    return "in_stream" if input_sorted else "new_in_sort"


def choose_operator_traditional(input_sorted, *, output_rows, memory_rows,
                                input_rows, fan_in, unsorted_output_ok):
    """The pre-existing decision procedure the single-operator rule
    replaces; depends on cardinality estimates."""
    if input_sorted:
        return "in_stream"
    if output_rows < memory_rows and unsorted_output_ok:
        return "hash"
    if input_rows / max(1, output_rows) < fan_in:
        return "traditional_in_sort"
    return "hash_plus_sort"


def output_checksum(rows, schema):
    """Order-independent multiset checksum over finalized output rows."""
    total = 0
    xor = 0
    finalize = schema.finalize
    for row in rows:
        parts = [struct.pack("<q", v) if isinstance(v, int)
                 else str(v).encode() for v in row.key]
        for v in finalize(row.state):
            parts.append(struct.pack("<d", float(v)))
        h = int.from_bytes(
            hashlib.blake2b(b"|".join(parts), digest_size=8).digest(),
            "little")
        total = (total + h) & 0xFFFFFFFFFFFFFFFF
        xor ^= h
    return f"{total:016x}{xor:016x}"


def is_sorted_strict(rows):
    return all(rows[i - 1].key < rows[i].key for i in range(1, len(rows)))


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Expectation:
    metric: str
    op: str  # "~" (within relative tolerance), "<=", ">=", "=="
    value: float
    tolerance: float = 0.0  # relative, for "~"

    def check(self, measured):
        if self.op == "~":
            return abs(measured - self.value) <= self.tolerance * self.value
        if self.op == "<=":
            return measured <= self.value
        if self.op == ">=":
            return measured >= self.value
        if self.op == "==":
            return measured == self.value
        raise InvalidInputError(f"unknown expectation op {self.op!r}")


@dataclass
class Scenario:
    name: str
    generator: GeneratorSpec
    operator: str = "sortagg"  # sortagg | hashagg | sort_then_dedup
    memory_rows: int = 1000
    page_rows: int = 100
    mode: str = WIDE  # sortagg merge mode
    rungen: str = "read_sort_write"
    ovc: bool = True
    ovc_cache: bool = True
    interpolation: bool = False
    batch_size: int = 1
    output_hint: str = "none"  # none | oracle | integer literal
    retain_rows: bool = False
    rungen_only: bool = False
    expectations: tuple = ()

    def resolved_hint(self):
        if self.output_hint == "none":
            return None
        if self.output_hint == "oracle":
            return self.generator.distinct
        return int(self.output_hint)


def make_store(scenario=None, store_dir=None, retain_rows=False):
    if store_dir:
        return FileStore(store_dir)
    return MemoryStore(retain_rows=retain_rows)


def _sort_config(scn):
    return SortAggConfig(
        memory_budget=scn.memory_rows,
        page_capacity=scn.page_rows,
        run_generation_mode=scn.rungen,
        merge_mode=SEPARATE if scn.operator == "sort_then_dedup" else scn.mode,
        ovc_enabled=scn.ovc,
        ovc_cache=scn.ovc_cache,
        interpolation_search=scn.interpolation,
        batch_size=scn.batch_size,
        output_size_hint=scn.resolved_hint(),
    )


def _model_method(scn):
    if scn.operator == "hashagg":
        return costmodel.HASH
    if scn.operator == "sort_then_dedup":
        return costmodel.SORT_SEPARATE
    if scn.mode == TRADITIONAL:
        return costmodel.SORT_TRADITIONAL
    if scn.rungen == REPLACEMENT_SELECTION:
        return costmodel.NEW_IN_SORT_RS
    return costmodel.NEW_IN_SORT


def run_scenario(scenario, store=None):
    """Execute one scenario; returns a report row (plain dict).

    The operator output must match the reference aggregation checksum or
    the report is marked incorrect (and `passed` false).
    """
    scn = scenario
    schema, rows = generate(scn.generator)
    store = store if store is not None else MemoryStore(
        retain_rows=scn.retain_rows)
    ledger = MetricsLedger()
    plan_summary = ""
    sorted_output = None

    if scn.operator in ("sortagg", "sort_then_dedup"):
        cfg = _sort_config(scn)
        op = SortAggregate(schema, cfg, store, ledger)
        if scn.rungen_only:
            runs, index, _est, _seen = index_run_generation(
                rows, schema, cfg, store, op.codec, ledger)
            output = [Row(k, s) for k, s in index.evict_all()] if not runs \
                else None
            correct = True  # correctness is checked on full executions only
            out_rows = -1 if output is None else len(output)
            checksum = ref_checksum = ""
        else:
            output = op.execute(iter(rows))
            sorted_output = is_sorted_strict(output)
            out_rows = len(output)
            checksum = output_checksum(output, schema)
            ref_checksum = output_checksum(
                reference_aggregate(rows, schema), schema)
            correct = checksum == ref_checksum and sorted_output
        if op.initial_plan is not None:
            plan_summary = "+".join(s.kind for s in op.initial_plan.steps)
    elif scn.operator == "hashagg":
        cfg = HashAggConfig(memory_budget=scn.memory_rows,
                            page_capacity=scn.page_rows,
                            output_size_hint=scn.resolved_hint())
        op = HashAggregate(schema, cfg, store, ledger)
        output = op.execute(rows)
        out_rows = len(output)
        checksum = output_checksum(output, schema)
        ref_checksum = output_checksum(
            reference_aggregate(rows, schema), schema)
        correct = checksum == ref_checksum
    else:
        raise InvalidInputError(f"unknown operator {scn.operator!r}")

    g = scn.generator
    fan = scn.memory_rows // scn.page_rows
    try:
        params = costmodel.ModelParams(
            g.rows, g.distinct, scn.memory_rows, scn.page_rows,
            _model_method(scn), fan)
        predicted_spill = costmodel.spill_volume(params)
    except InvalidInputError:
        predicted_spill = ""
    predicted_rungen = costmodel.predicted_rungen_spill(
        g.rows, g.distinct, scn.memory_rows)

    report = {
        "scenario": scn.name,
        "operator": scn.operator,
        "mode": scn.mode if scn.operator != "hashagg" else "",
        "rungen": scn.rungen if scn.operator != "hashagg" else "",
        "ovc": int(scn.ovc),
        "I": g.rows,
        "O": g.distinct,
        "distribution": g.distribution,
        "K": g.columns,
        "seed": g.seed,
        "memory_rows": scn.memory_rows,
        "page_rows": scn.page_rows,
        "fan": fan,
        "output_rows": out_rows,
        "output_checksum": checksum,
        "reference_checksum": ref_checksum,
        "correct": int(correct),
        "plan": plan_summary,
        "predicted_spill_rows": predicted_spill,
        "predicted_rungen_spill_rows": predicted_rungen,
    }
    report.update(ledger.as_dict())
    failures = []
    for exp in scn.expectations:
        measured = report.get(exp.metric)
        ok = measured is not None and exp.check(float(measured))
        report[f"expect_{exp.metric}_{exp.op}"] = int(bool(ok))
        if not ok:
            failures.append(exp)
    report["passed"] = int(correct and not failures)
    return report


REPORT_COLUMNS = [
    "scenario", "operator", "mode", "rungen", "ovc", "I", "O",
    "distribution", "K", "seed", "memory_rows", "page_rows", "fan",
    "output_rows", "output_checksum", "reference_checksum", "correct",
    "plan", "predicted_spill_rows", "predicted_rungen_spill_rows",
    "row_comparisons", "ovc_decided_comparisons", "column_value_accesses",
    "hash_computations", "rows_spilled", "rows_read_back", "pages_written",
    "pages_read", "merge_steps", "merge_levels", "passed",
]


def emit_report(report_rows, path):
    """Write report rows as CSV; bit-stable for identical inputs."""
    extra = sorted({k for r in report_rows for k in r}
                   - set(REPORT_COLUMNS))
    cols = REPORT_COLUMNS + extra
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for r in report_rows:
            writer.writerow({k: r.get(k, "") for k in cols})


# ---------------------------------------------------------------------------
# scenario files (key = value sections)
# ---------------------------------------------------------------------------

_BOOL = {"on": True, "off": False, "true": True, "false": False,
         "1": True, "0": False, "yes": True, "no": False}


def _parse_expectation(metric, text):
    parts = text.split()
    if not parts:
        raise InvalidInputError(f"empty expectation for {metric}")
    op = parts[0]
    value = float(parts[1])
    tol = 0.0
    if len(parts) >= 4 and parts[2] == "@":
        tol = float(parts[3].rstrip("%")) / 100.0
    metric = metric.split(".")[0]  # allow metric.2 = ... for duplicates
    return Expectation(metric, op, value, tol)


def load_scenario(path, overrides=()):
    """Load a scenario file; ``overrides`` are ``section.key=value`` or
    ``key=value`` strings applied on top."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise InvalidInputError(f"cannot read scenario file {path}")
    for item in overrides:
        key, _, value = item.partition("=")
        if not _:
            raise InvalidInputError(f"override {item!r} is not key=value")
        section, _, name = key.strip().partition(".")
        if not name:
            section, name = "scenario", section
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value.strip())
    s = parser["scenario"] if parser.has_section("scenario") else {}
    g = parser["generator"] if parser.has_section("generator") else {}
    gen = GeneratorSpec(
        rows=int(g.get("rows", 1000)),
        distinct=int(g.get("distinct", 100)),
        distribution=g.get("distribution", "uniform"),
        columns=int(g.get("columns", 1)),
        domain=int(g["domain"]) if "domain" in g else None,
        zipf_s=float(g.get("zipf_s", 1.2)),
        payload=_BOOL.get(str(g.get("payload", "off")).lower(), False),
        aggregates=g.get("aggregates", ""),
        seed=int(g.get("seed", s.get("seed", 0))),
    )
    expectations = []
    if parser.has_section("expectations"):
        for metric, text in parser["expectations"].items():
            expectations.append(_parse_expectation(metric, text))
    return Scenario(
        name=s.get("name", "unnamed"),
        generator=gen,
        operator=s.get("operator", "sortagg"),
        memory_rows=int(s.get("memory_rows", 1000)),
        page_rows=int(s.get("page_rows", 100)),
        mode=s.get("mode", WIDE),
        rungen=s.get("rungen", "read_sort_write"),
        ovc=_BOOL.get(str(s.get("ovc", "on")).lower(), True),
        ovc_cache=_BOOL.get(str(s.get("ovc_cache", "on")).lower(), True),
        interpolation=_BOOL.get(str(s.get("interpolation", "off")).lower(),
                                False),
        batch_size=int(s.get("batch_size", 1)),
        output_hint=s.get("output_hint", "none"),
        retain_rows=_BOOL.get(str(s.get("retain_rows", "off")).lower(),
                              False),
        rungen_only=_BOOL.get(str(s.get("rungen_only", "off")).lower(),
                              False),
        expectations=tuple(expectations),
    )


# ---------------------------------------------------------------------------
# set-intersection plans (two-input comparison)
# ---------------------------------------------------------------------------

def merge_intersect(sorted_a, sorted_b):
    """Zipper intersection of two key-sorted row lists; zero extra memory."""
    out = []
    i = j = 0
    while i < len(sorted_a) and j < len(sorted_b):
        ka, kb = sorted_a[i].key, sorted_b[j].key
        if ka == kb:
            out.append(ka)
            i += 1
            j += 1
        elif ka < kb:
            i += 1
        else:
            j += 1
    return out


def sort_intersect_plan(rows_a, rows_b, schema, *, memory_rows, page_rows,
                        rungen="read_sort_write"):
    """Two in-sort aggregations plus a streaming merge intersection.

    Returns ``(keys, combined_ledgers)``; the merge join consumes the sorted
    outputs directly and spills nothing.
    """
    ledgers = []
    outs = []
    for rows in (rows_a, rows_b):
        cfg = SortAggConfig(memory_budget=memory_rows,
                            page_capacity=page_rows,
                            run_generation_mode=rungen)
        op = SortAggregate(schema, cfg, MemoryStore())
        outs.append(op.execute(iter(rows)))
        ledgers.append(op.ledger)
    return merge_intersect(*outs), ledgers


def _hash_intersect(rows_a, rows_b, schema, config, store, ledger, o_est,
                    level=0):
    """Set intersection with memory-split partitioning on both inputs."""
    if level > config.max_levels:
        raise InvalidInputError("intersection recursion limit exceeded")
    M, P, F = config.memory_budget, config.page_capacity, config.max_fanout
    codec = RowCodec(schema)
    arity = schema.arity
    if o_est <= M:
        ledger.hash_computations += len(rows_a) + len(rows_b)
        ledger.column_value_accesses += arity * (len(rows_a) + len(rows_b))
        keys = {r.key for r in rows_a}
        return sorted(k for k in {r.key for r in rows_b} if k in keys)
    f = costmodel.hybrid_fanout(o_est, M, P)
    if f > F or not config.hybrid:
        f = F
    share = (1.0 - f / F) * (M / o_est)
    width = (1.0 - share) / f
    resident_a = set()
    out = set()
    parts = [[], []]
    writers = [[None] * f, [None] * f]
    counts = [[0] * f, [0] * f]
    for side, rows in enumerate((rows_a, rows_b)):
        ledger.hash_computations += len(rows)
        ledger.column_value_accesses += arity * len(rows)
        for row in rows:
            u = hash_uniform(codec.encode_key(row.key), level)
            if u < share:
                if side == 0:
                    resident_a.add(row.key)
                elif row.key in resident_a:
                    out.add(row.key)
            else:
                b = min(int((u - share) / width), f - 1)
                w = writers[side][b]
                if w is None:
                    from .runstore import RunWriter
                    w = RunWriter(store, codec, P, ledger, sorted_check=False,
                                  zero_high_key=True)
                    writers[side][b] = w
                w.add(row)
                counts[side][b] += 1
    from .runstore import iter_run
    spilled_o = max(1, o_est - len(resident_a))
    for b in range(f):
        wa, wb = writers[0][b], writers[1][b]
        if wa is None or wb is None:
            continue
        ra = list(iter_run(store, codec, wa.close(), ledger))
        rb = list(iter_run(store, codec, wb.close(), ledger))
        out.update(_hash_intersect(ra, rb, schema, config, store, ledger,
                                   max(1, round(spilled_o / f)), level + 1))
    return sorted(out)


def hash_intersect_plan(rows_a, rows_b, schema, *, memory_rows, page_rows,
                        distinct_hint):
    """Two hash aggregations plus a hash join for the intersection; every
    spilled row is written and read on both the aggregation and join sides.

    Returns ``(keys, ledger)`` with one combined ledger.
    """
    ledger = MetricsLedger()
    store = MemoryStore()
    outs = []
    for rows in (rows_a, rows_b):
        cfg = HashAggConfig(memory_budget=memory_rows,
                            page_capacity=page_rows,
                            output_size_hint=distinct_hint)
        op = HashAggregate(schema, cfg, store, ledger)
        outs.append(op.execute(rows))
    cfg = HashAggConfig(memory_budget=memory_rows, page_capacity=page_rows,
                        output_size_hint=distinct_hint)
    keys = _hash_intersect(outs[0], outs[1], schema, cfg, store, ledger,
                           distinct_hint)
    return keys, ledger
