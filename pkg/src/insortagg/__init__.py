"""Duplicate removal, grouping, and aggregation over unsorted inputs.

A single sort-based operator (early aggregation in an ordered in-memory
index plus a wide final merge) alongside a hybrid hash-aggregation baseline,
fully instrumented: spill volumes, comparison counts, and column accesses
are first-class measurements checked against closed-form cost models.
"""

from .core import (
    AggregateKind,
    AggregateSpec,
    ColumnSpec,
    INT64,
    UTF8,
    MetricsLedger,
    Row,
    Schema,
    compare_rows,
)
from .hashagg import HashAggConfig, HashAggregate, hybrid_fanout
from .memindex import InsertOutcome, OrderedIndex
from .losertree import LoserTree
from .runstore import FileStore, MemoryStore, RowCodec, RunMeta
from .sortagg import SortAggConfig, SortAggregate

__all__ = [
    "AggregateKind", "AggregateSpec", "ColumnSpec", "INT64", "UTF8",
    "MetricsLedger", "Row", "Schema", "compare_rows",
    "HashAggConfig", "HashAggregate", "hybrid_fanout",
    "InsertOutcome", "OrderedIndex", "LoserTree",
    "FileStore", "MemoryStore", "RowCodec", "RunMeta",
    "SortAggConfig", "SortAggregate",
]

__version__ = "0.1.0"
