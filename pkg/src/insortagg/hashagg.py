"""Hash aggregation with recursive/hybrid partitioning to temporary storage.

The baseline the sort-based operator is measured against.  An input whose
distinct keys fit in memory aggregates entirely in an in-memory table.
Otherwise memory is split between a hash table for part of the output and
output buffers for ``f`` spilled partitions, ``f = ceil((O-M)/(M-P))``;
partitions are processed recursively, depth first.  When the output exceeds
fan-out times memory no table is kept at all (full partitioning).

Accounting: every row processed at a level costs one hash computation and
one column access per key column; a match in the in-memory table costs two
accesses per key column to verify equality.  Partition files reuse the run
page format with unsorted rows and a zeroed high key.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from .core import InvalidInputError, MetricsLedger, ResourceError, Row
from .costmodel import hybrid_fanout
from .runstore import RowCodec, RunWriter, iter_run

_SCALE = float(1 << 64)


@dataclass
class HashAggConfig:
    memory_budget: int
    page_capacity: int
    hybrid: bool = True
    output_size_hint: int | None = None
    max_levels: int = 8

    def __post_init__(self):
        if self.page_capacity < 1:
            raise InvalidInputError("page capacity must be positive")
        if self.memory_budget <= self.page_capacity:
            raise InvalidInputError("memory budget must exceed one page")
        if self.max_fanout < 2:
            raise InvalidInputError("fan-out must be at least 2")

    @property
    def max_fanout(self):
        return self.memory_budget // self.page_capacity


@dataclass
class Partition:
    """One spilled hash partition: its position in the recursion and the
    unsorted row file backing it."""

    partition_id: int
    level: int
    bucket_index: int
    run: object
    row_count: int


def hash_uniform(key_bytes, level):
    """Deterministic well-mixed stable hash, mapped to [0, 1).

    Levels are salted independently so recursive partitioning re-divides
    every bucket afresh.
    """
    h = hashlib.blake2b(key_bytes, digest_size=8,
                        key=b"level-%d" % level).digest()
    return int.from_bytes(h, "little") / _SCALE


class HashAggregate:
    """Hash aggregation operator; unordered output.

    ``execute`` returns aggregated rows (insertion order of first key
    arrival per table, partitions appended depth first).  The output size is
    taken from ``output_size_hint`` when given; otherwise it is extrapolated
    from the distinct fraction seen before the table first fills.
    """

    def __init__(self, schema, config, store, ledger=None):
        self.schema = schema
        self.config = config
        self.store = store
        self.ledger = ledger if ledger is not None else MetricsLedger()
        self.codec = RowCodec(schema)
        self.partitions = []
        self._next_partition_id = 0

    def execute(self, rows):
        rows = list(rows) if not isinstance(rows, list) else rows
        o_hint = self.config.output_size_hint
        if o_hint is None:
            o_hint = self._estimate_output(rows)
        return self._process(rows, o_hint, level=0)

    def _estimate_output(self, rows):
        """Distinct-fraction extrapolation over a leading sample."""
        m = self.config.memory_budget
        seen = set()
        scanned = 0
        for row in rows:
            scanned += 1
            seen.add(row.key)
            if len(seen) >= m:
                break
        if len(seen) < m or scanned == 0:
            return len(seen) or 1
        return max(1, round(len(rows) * len(seen) / scanned))

    def _charge_hash(self, n_rows):
        self.ledger.hash_computations += n_rows
        self.ledger.column_value_accesses += n_rows * self.schema.arity

    def _process(self, rows, o_est, level):
        if level > self.config.max_levels:
            raise ResourceError(
                "hash partitioning exceeded its recursion limit; "
                "hash values are badly skewed")
        cfg, ledger, schema = self.config, self.ledger, self.schema
        M, P, F = cfg.memory_budget, cfg.page_capacity, cfg.max_fanout
        merge = schema.merge_states
        encode_key = self.codec.encode_key
        arity = schema.arity
        o_est = min(o_est, len(rows)) if rows else 1

        if o_est <= M:
            # in-memory: one hash per row, verify on match
            table = {}
            matches = 0
            for i, row in enumerate(rows):
                cur = table.get(row.key)
                if cur is None:
                    table[row.key] = row.state
                    if len(table) > M:
                        # the estimate was wrong: charge the aborted pass and
                        # redo this input with a corrected, spilling estimate.
                        # Distinct counts saturate early, so temper the
                        # linear extrapolation rather than trusting it.
                        self._charge_hash(i + 1)
                        ledger.column_value_accesses += 2 * arity * matches
                        linear = len(rows) * len(table) / (i + 1)
                        corrected = max(M + 1, round(linear / 2))
                        return self._process(rows, corrected, level)
                else:
                    matches += 1
                    table[row.key] = merge(cur, row.state)
            self._charge_hash(len(rows))
            ledger.column_value_accesses += 2 * arity * matches
            return [Row(k, s) for k, s in table.items()]

        f = hybrid_fanout(o_est, M, P)
        if not cfg.hybrid or f > F:
            f = F
        table_share = (1.0 - f / F) * (M / o_est) if cfg.hybrid else 0.0
        if f >= F:
            table_share = 0.0

        table = {}
        writers = [
            RunWriter(self.store, self.codec, P, ledger, level=level,
                      sorted_check=False, zero_high_key=True)
            for _ in range(f)
        ]
        counts = [0] * f
        self._charge_hash(len(rows))
        matches = 0
        spill_width = (1.0 - table_share) / f
        for row in rows:
            u = hash_uniform(encode_key(row.key), level)
            if u < table_share:
                cur = table.get(row.key)
                if cur is None:
                    table[row.key] = row.state
                else:
                    matches += 1
                    table[row.key] = merge(cur, row.state)
            else:
                b = int((u - table_share) / spill_width)
                if b >= f:
                    b = f - 1
                writers[b].add(row)
                counts[b] += 1
        ledger.column_value_accesses += 2 * arity * matches
        output = [Row(k, s) for k, s in table.items()]
        spilled_output = o_est - len(table)
        for b, writer in enumerate(writers):
            if counts[b] == 0:
                continue
            meta = writer.close()
            self.partitions.append(Partition(
                self._next_partition_id, level, b, meta, counts[b]))
            self._next_partition_id += 1
            child_rows = list(iter_run(self.store, self.codec, meta, ledger))
            child_o = min(max(1, round(spilled_output / f)), counts[b])
            output.extend(self._process(child_rows, child_o, level + 1))
        return output
