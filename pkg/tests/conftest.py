import random

import pytest

from insortagg.core import (
    AggregateKind,
    AggregateSpec,
    ColumnSpec,
    INT64,
    Row,
    Schema,
)


def int_schema(columns=1, domain=1_000_000, aggregates=()):
    cols = [ColumnSpec(f"k{i}", INT64, domain) for i in range(columns)]
    return Schema(cols, aggregates)


def count_schema(columns=1, domain=1_000_000):
    return int_schema(columns, domain,
                      [AggregateSpec("n", AggregateKind.COUNT)])


def random_rows(rng, n_rows, n_distinct, schema, domain=None):
    """n_rows rows over exactly min(n_distinct, n_rows) keys (coverage not
    forced; used where approximate distinct counts are fine)."""
    domain = domain or schema.key_columns[0].domain
    keys = []
    for _ in range(n_rows):
        kid = rng.randrange(n_distinct)
        key = []
        rem = kid
        for _ in range(schema.arity):
            key.append(rem % domain)
            rem //= domain
        keys.append(tuple(reversed(key)))
    if schema.aggregates:
        return [Row(k, schema.make_state((1,) * len(schema.aggregates)))
                for k in keys]
    return [Row(k) for k in keys]


def reference(rows, schema):
    table = {}
    for r in rows:
        cur = table.get(r.key)
        table[r.key] = r.state if cur is None else \
            schema.merge_states(cur, r.state)
    return sorted(table.items())


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)
