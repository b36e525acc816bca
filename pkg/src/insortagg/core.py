"""Row/key/aggregate data model, schema definitions, and the metrics ledger.

Everything that flows through the operators is a ``Row``: a tuple of key
column values plus a mergeable aggregate state.  The ``MetricsLedger`` is the
single mutable sink for all instrumentation counters; every structure in the
engine writes into the ledger owned by the current operator execution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class EngineError(Exception):
    """Base class for all engine errors."""


class InvalidInputError(EngineError):
    pass


class OrderingViolationError(EngineError):
    pass


class ContractViolationError(EngineError):
    """A caller broke an internal API contract (caller bug, not data error)."""


class CorruptionError(EngineError):
    pass


class ResourceError(EngineError):
    pass


class PlanningError(EngineError):
    pass


INT64 = "int64"
UTF8 = "utf8"


class AggregateKind(str, Enum):
    COUNT = "count"
    SUM = "sum"
    MIN = "min"
    MAX = "max"
    AVG = "avg"


# number of accumulator slots each aggregate kind occupies in a state tuple
_SLOTS = {
    AggregateKind.COUNT: 1,
    AggregateKind.SUM: 1,
    AggregateKind.MIN: 1,
    AggregateKind.MAX: 1,
    AggregateKind.AVG: 2,  # running sum + running count
}


@dataclass(frozen=True)
class ColumnSpec:
    """A key column: 64-bit integers in ``[0, domain)`` or utf8 strings."""

    name: str
    kind: str = INT64
    domain: int = 2**32

    def __post_init__(self):
        if self.kind not in (INT64, UTF8):
            raise InvalidInputError(f"unknown column kind {self.kind!r}")
        if self.kind == INT64 and self.domain <= 0:
            raise InvalidInputError("int64 column needs a positive domain")


@dataclass(frozen=True)
class AggregateSpec:
    """One aggregate: its kind and the input column it consumes.

    ``column`` is None for COUNT (no input needed).  The input column is a
    payload column of the input stream, not one of the key columns.
    """

    name: str
    kind: AggregateKind
    column: str | None = None


class Row:
    """Unit of data flow: key columns plus aggregate state.

    ``ovc`` is the per-row cache of offset-value code components, filled
    lazily by the ovc module; it never holds a code inconsistent with the
    key (codes are pure functions of key column values).
    """

    __slots__ = ("key", "state", "ovc")

    def __init__(self, key, state=(), ovc=None):
        self.key = key
        self.state = state
        self.ovc = ovc

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Row(key={self.key!r}, state={self.state!r})"


class Schema:
    """Grouping schema: ordered key columns and the aggregate list.

    Precomputes the aggregate state layout so that state construction,
    merging, and finalization are plain tuple operations.
    """

    def __init__(self, key_columns, aggregates=()):
        key_columns = tuple(key_columns)
        aggregates = tuple(aggregates)
        if not key_columns:
            raise InvalidInputError("schema needs at least one key column")
        names = [c.name for c in key_columns] + [a.name for a in aggregates]
        if len(set(names)) != len(names):
            raise InvalidInputError("column names must be unique")
        self.key_columns = key_columns
        self.aggregates = aggregates
        self.arity = len(key_columns)
        # OVC applies to the leading run of integer columns only; a string
        # column ends the encodable prefix.
        prefix = 0
        for col in key_columns:
            if col.kind != INT64:
                break
            prefix += 1
        self.ovc_prefix = prefix
        self.ovc_domain = max(
            [c.domain for c in key_columns[:prefix]] or [1]
        )
        # state slot layout: (aggregate index, kind) per slot, used by the
        # runstore codec to pick a serializer per slot
        self._ops = []
        slot_kinds = []
        for agg in aggregates:
            if agg.kind not in _SLOTS:
                raise InvalidInputError(f"unknown aggregate kind {agg.kind!r}")
            self._ops.append(agg.kind)
            if agg.kind in (AggregateKind.MIN, AggregateKind.MAX):
                slot_kinds.append("value")
            elif agg.kind == AggregateKind.AVG:
                slot_kinds.extend(["numeric", "numeric"])
                continue
            else:
                slot_kinds.append("numeric")
        self.state_slots = sum(_SLOTS[a.kind] for a in aggregates)
        self.state_slot_kinds = tuple(slot_kinds)

    def key_column_names(self):
        return tuple(c.name for c in self.key_columns)

    def make_state(self, inputs=()):
        """Build the state of a single input row.

        ``inputs`` is parallel to ``self.aggregates``; COUNT entries may be
        None.
        """
        if len(inputs) != len(self.aggregates) and self.aggregates:
            raise InvalidInputError(
                f"expected {len(self.aggregates)} aggregate inputs, "
                f"got {len(inputs)}"
            )
        out = []
        for agg, value in zip(self.aggregates, inputs):
            if agg.kind == AggregateKind.COUNT:
                out.append(1)
            elif agg.kind == AggregateKind.AVG:
                out.append(value)
                out.append(1)
            else:
                out.append(value)
        return tuple(out)

    def merge_states(self, a, b):
        """Combine two states built under this schema.

        Commutative and associative; merging the state of row set A with the
        state of row set B yields the state of A ∪ B.
        """
        if len(a) != self.state_slots or len(b) != self.state_slots:
            raise InvalidInputError("aggregate state does not match schema")
        out = []
        i = 0
        for kind in self._ops:
            if kind == AggregateKind.COUNT or kind == AggregateKind.SUM:
                out.append(a[i] + b[i])
                i += 1
            elif kind == AggregateKind.MIN:
                out.append(a[i] if a[i] <= b[i] else b[i])
                i += 1
            elif kind == AggregateKind.MAX:
                out.append(a[i] if a[i] >= b[i] else b[i])
                i += 1
            else:  # AVG: sum slot + count slot
                out.append(a[i] + b[i])
                out.append(a[i + 1] + b[i + 1])
                i += 2
        return tuple(out)

    def finalize(self, state):
        """Turn an accumulated state into output values (AVG becomes sum/count)."""
        out = []
        i = 0
        for kind in self._ops:
            if kind == AggregateKind.AVG:
                out.append(state[i] / state[i + 1])
                i += 2
            else:
                out.append(state[i])
                i += 1
        return tuple(out)


class MetricsLedger:
    """Monotone counters for one operator execution.

    All counters only ever increase while an operator runs.  Debug-mode
    assertions (e.g. sortedness checks) never write here; the ledger records
    algorithm work only.
    """

    __slots__ = (
        "row_comparisons",
        "ovc_decided_comparisons",
        "column_value_accesses",
        "hash_computations",
        "rows_spilled",
        "rows_read_back",
        "pages_written",
        "pages_read",
        "merge_steps",
        "merge_levels",
    )

    def __init__(self):
        for name in self.__slots__:
            setattr(self, name, 0)

    def as_dict(self):
        return {name: getattr(self, name) for name in self.__slots__}

    def check_invariants(self):
        """Raise if cross-counter invariants are violated."""
        if self.rows_read_back > self.rows_spilled:
            raise ContractViolationError(
                f"rows_read_back {self.rows_read_back} exceeds "
                f"rows_spilled {self.rows_spilled}"
            )

    def __repr__(self):  # pragma: no cover - debugging aid
        parts = ", ".join(f"{k}={v}" for k, v in self.as_dict().items() if v)
        return f"MetricsLedger({parts})"


def compare_rows(a, b, schema, ledger=None):
    """Lexicographic comparison over key columns.

    Returns ``(sign, offset)`` where sign is -1/0/+1 and offset is the index
    of the first differing column (``arity`` when the keys are equal).
    Column accesses stop at the first difference: the ledger is charged
    exactly ``2 * (offset + 1)`` accesses (``2 * arity`` for equal keys).
    """
    ka, kb = a.key, b.key
    arity = schema.arity
    if len(ka) != arity or len(kb) != arity:
        raise InvalidInputError("row does not conform to schema")
    offset = arity
    sign = 0
    for i in range(arity):
        va, vb = ka[i], kb[i]
        if va != vb:
            offset = i
            sign = -1 if va < vb else 1
            break
    if ledger is not None:
        ledger.row_comparisons += 1
        ledger.column_value_accesses += 2 * (min(offset, arity - 1) + 1)
    return sign, offset
