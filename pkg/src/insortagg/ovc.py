"""Offset-value coding over key columns.

A code encodes a row relative to an earlier row in the sort order as a single
integer combining the offset of the first differing column and that column's
value.  Two codes relative to the same base row decide a comparison without
touching any column values.

Codes exist in two flavors over a per-column domain ``D`` and key arity ``K``:

* descending: ``offset * D + (D - value)``; duplicates encode as ``K * D``.
  Relative to a shared base, the *larger* descending code sorts earlier.
* ascending: ``(K - offset) * D + value``; duplicates encode as ``0``.
  Relative to a shared base, the *smaller* ascending code sorts earlier.

Each row lazily caches the code component for every offset it has ever needed
(``Row.ovc``).  A cache miss costs exactly one column access; hits are free.
This bounds the column accesses of an entire sort by rows x columns.

Codes cover only the leading run of integer key columns
(``schema.ovc_prefix``); comparisons falling past that prefix finish with
direct column comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import ContractViolationError, OrderingViolationError, compare_rows

ASCENDING = "ascending"
DESCENDING = "descending"


@dataclass(frozen=True)
class OffsetValueCode:
    code: int
    direction: str

    def offset(self, schema):
        """Recover the column offset this code was derived at."""
        d = schema.ovc_domain
        if self.direction == DESCENDING:
            return self.code // d
        return schema.arity - self.code // d

    def is_duplicate(self, schema):
        return self.offset(schema) >= schema.arity


def duplicate_code(direction, schema):
    """Code of a row equal to its base."""
    if direction == DESCENDING:
        return schema.arity * schema.ovc_domain
    return 0


def code_at(row, offset, direction, schema, ledger=None, use_cache=True):
    """Code component of ``row`` at ``offset``: the code the row would carry
    relative to any base sharing exactly ``offset`` leading columns.

    Returns None for offsets past the integer-column prefix (no code exists
    there).  Charges one column access on a cache miss; cached components are
    free, which is what keeps total accesses bounded by rows x columns.
    """
    arity = schema.arity
    if offset >= arity:
        return duplicate_code(direction, schema)
    if offset >= schema.ovc_prefix:
        return None
    value = None
    if use_cache:
        cache = row.ovc
        if cache is None:
            cache = [None] * schema.ovc_prefix
            row.ovc = cache
        value = cache[offset]
    if value is None:
        value = row.key[offset]  # the one column access
        if ledger is not None:
            ledger.column_value_accesses += 1
        if use_cache:
            cache[offset] = value
    d = schema.ovc_domain
    if direction == DESCENDING:
        return offset * d + (d - value)
    return (arity - offset) * d + value


def _decide(direction, code_a, code_b):
    """Ordering of two rows from codes relative to the same base (-1: a first)."""
    if code_a == code_b:
        return 0
    if direction == DESCENDING:
        return -1 if code_a > code_b else 1
    return -1 if code_a < code_b else 1


def ladder_compare(a, b, direction, schema, ledger=None, use_cache=True,
                   start_offset=0):
    """Full-key comparison driven by per-offset code components.

    Walks offsets from ``start_offset`` comparing the two rows' cached code
    components; equal components mean equal columns.  Returns
    ``(sign, offset)`` like ``compare_rows`` and charges only cache misses,
    so repeated comparisons of the same rows cost no further column accesses.
    Columns past the integer prefix are compared directly (two accesses per
    column pair).
    """
    arity = schema.arity
    prefix = schema.ovc_prefix
    column_misses = 0
    if ledger is not None:
        before = ledger.column_value_accesses
    for off in range(start_offset, arity):
        if off < prefix:
            ca = code_at(a, off, direction, schema, ledger, use_cache)
            cb = code_at(b, off, direction, schema, ledger, use_cache)
            sign = _decide(direction, ca, cb)
        else:
            va, vb = a.key[off], b.key[off]
            if ledger is not None:
                ledger.column_value_accesses += 2
            sign = 0 if va == vb else (-1 if va < vb else 1)
        if sign:
            if ledger is not None:
                ledger.row_comparisons += 1
                if ledger.column_value_accesses == before:
                    ledger.ovc_decided_comparisons += 1
            return sign, off
    if ledger is not None:
        ledger.row_comparisons += 1
        if ledger.column_value_accesses == before:
            ledger.ovc_decided_comparisons += 1
    return 0, arity


def encode(row, base, direction, schema, ledger=None, use_cache=True):
    """Code of ``row`` relative to ``base``; base None means the virtual
    low sentinel preceding every row (code taken at offset 0).

    Raises OrderingViolationError if ``row`` sorts before ``base``.
    """
    if base is None:
        code = code_at(row, 0, direction, schema, ledger, use_cache)
        if code is None:
            raise ContractViolationError(
                "offset-value coding needs at least one integer key column"
            )
        return OffsetValueCode(code, direction)
    sign, off = ladder_compare(row, base, direction, schema, ledger, use_cache)
    if sign < 0:
        raise OrderingViolationError(
            f"row {row.key!r} sorts before its base {base.key!r}"
        )
    if sign == 0:
        return OffsetValueCode(duplicate_code(direction, schema), direction)
    code = code_at(row, off, direction, schema, ledger, use_cache)
    if code is None:
        # difference falls past the encodable prefix; no code exists
        return None
    return OffsetValueCode(code, direction)


def compare_with_codes(a, code_a, b, code_b, schema, ledger=None,
                       use_cache=True):
    """Compare two rows whose codes are relative to the same base row.

    Returns ``(sign, code_a_if_loser, code_b_if_loser)``: the caller applies
    the matching update to whichever row loses the comparison (the loser's
    code becomes relative to the winner; the winner keeps its code).

    Unequal codes decide the comparison with zero column accesses.  Equal
    codes mean the rows share a prefix through the code's offset; the
    comparison then proceeds column by column from the next offset, charged
    through the per-row code cache.
    """
    if code_a.direction != code_b.direction:
        raise ContractViolationError("codes with mixed directions")
    direction = code_a.direction
    if code_a.code != code_b.code:
        if ledger is not None:
            ledger.row_comparisons += 1
            ledger.ovc_decided_comparisons += 1
        sign = _decide(direction, code_a.code, code_b.code)
        # the loser's existing code is already valid relative to the winner:
        # the winner agrees with the shared base through the loser's offset
        return sign, code_a, code_b
    shared = code_a.offset(schema)
    if shared >= schema.arity:
        # both rows equal the base, hence each other
        if ledger is not None:
            ledger.row_comparisons += 1
            ledger.ovc_decided_comparisons += 1
        dup = OffsetValueCode(duplicate_code(direction, schema), direction)
        return 0, dup, dup
    sign, off = ladder_compare(a, b, direction, schema, ledger, use_cache,
                               start_offset=shared + 1)
    if sign == 0:
        dup = OffsetValueCode(duplicate_code(direction, schema), direction)
        return 0, dup, dup
    if off < schema.ovc_prefix:
        a_new = OffsetValueCode(
            code_at(a, off, direction, schema, ledger, use_cache), direction)
        b_new = OffsetValueCode(
            code_at(b, off, direction, schema, ledger, use_cache), direction)
    else:
        a_new = b_new = None  # deciding column not encodable
    return sign, a_new, b_new
