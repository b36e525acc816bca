"""Closed-form spill and column-access models for the aggregation methods.

These are the analytical counterparts the measured metrics are compared
against: no-spill conditions, total spill volumes (rows written to temporary
storage, each such row also read back once), the run-generation spill
prediction for early aggregation under replacement selection, and the
column-access extremes for sort- versus hash-based duplicate removal.

Spill methods:

* ``hash_partitioning``        recursive/hybrid hash aggregation
* ``sort_separate_agg``        full external sort, aggregation afterwards
* ``sort_traditional_early_agg`` external sort with duplicate collapse in
                               merge steps whose input exceeds the output
* ``new_in_sort``              early aggregation + wide merging
* ``new_in_sort_replacement_selection``  same, runs twice memory size

Level counts are exact integer computations (no float logs near power
boundaries).  Real-valued variants are provided for smooth curve plotting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import InvalidInputError

HASH = "hash_partitioning"
SORT_SEPARATE = "sort_separate_agg"
SORT_TRADITIONAL = "sort_traditional_early_agg"
NEW_IN_SORT = "new_in_sort"
NEW_IN_SORT_RS = "new_in_sort_replacement_selection"

METHODS = (HASH, SORT_SEPARATE, SORT_TRADITIONAL, NEW_IN_SORT, NEW_IN_SORT_RS)


@dataclass(frozen=True)
class ModelParams:
    I: int
    O: int
    M: int
    P: int
    method: str
    F: int | None = None

    def __post_init__(self):
        if not (0 < self.O <= self.I):
            raise InvalidInputError("need 0 < O <= I")
        if not (self.M >= self.P >= 1):
            raise InvalidInputError("need M >= P >= 1")
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        if self.fan is None or self.fan < 2:
            raise InvalidInputError("fan-in/out must be at least 2")

    @property
    def fan(self):
        return self.F if self.F is not None else self.M // self.P


def merge_levels(target, M, F):
    """Smallest L >= 0 with M * F**L >= target (integer exact)."""
    levels = 0
    size = M
    while size < target:
        size *= F
        levels += 1
    return levels


def needs_spill(params):
    """No-spill conditions: hash-style methods spill iff the output exceeds
    memory; sort-without-early-aggregation methods iff the input does."""
    if params.method in (HASH, NEW_IN_SORT, NEW_IN_SORT_RS):
        return params.O > params.M
    return params.I > params.M


def hybrid_fanout(O, M, P):
    """Partition count for a hybrid split: smallest f with the in-memory
    share plus f spilled partitions covering the output."""
    if O <= 0:
        raise InvalidInputError("output size must be positive")
    if M <= P:
        raise InvalidInputError("memory must exceed one page")
    if O <= M:
        return 0
    return -(-(O - M) // (M - P))


def _hybrid_spill_fraction(O, M, P, F):
    """Fraction of the input written to partitions under a hybrid split."""
    f = hybrid_fanout(O, M, P)
    return 1.0 - (1.0 - f / F) * (M / O)


def _hash_spill(I, O, M, P, F, hybrid):
    if O <= M:
        return 0.0
    if hybrid and O <= F * M:
        return _hybrid_spill_fraction(O, M, P, F) * I
    return I + _hash_spill(I, O / F, M, P, F, hybrid)


def _traditional_step_sim(I, O, M, F, run_size):
    """Discrete merge schedule for sort with traditional early aggregation.

    Run generation writes the whole input as runs of ``run_size``.  Full
    merge levels move the whole input while merged runs stay smaller than
    the output; once a level would exceed the output size, merge steps of
    fan-in F (the first step smaller, so the rest come out even) reduce the
    run count to F with outputs clipped to O, and the final merge produces
    the result without spilling.
    """
    spill = I
    runs = -(-I // run_size)
    size = run_size
    while size * F <= O and runs > F:
        spill += I
        runs = -(-runs // F)
        size *= F
    if runs > F:
        need = runs - F
        rem = need % (F - 1)
        full = need // (F - 1)
        if rem:
            spill += min((rem + 1) * size, O)
        spill += full * min(F * size, O)
    return spill


def spill_volume(params, *, levels="ceil", hybrid=False,
                 replacement_selection=False):
    """Total rows written to temporary storage (each also read back once).

    ``levels="ceil"`` gives discrete-step predictions (default, matches the
    worked examples); ``levels="real"`` the smooth curve variants.
    ``hybrid`` enables the partial-level hybrid adjustment for the
    hash-style methods.  ``replacement_selection`` applies to
    ``sort_separate_agg`` (the new in-sort method has its own enum value).
    """
    I, O, M, P, F = params.I, params.O, params.M, params.P, params.fan
    method = params.method
    if method in (HASH, NEW_IN_SORT):
        if O <= M:
            return 0.0
        if levels == "real":
            if hybrid and O <= F * M:
                return _hybrid_spill_fraction(O, M, P, F) * I
            return math.log(O / M, F) * I
        if hybrid:
            return _hash_spill(I, O, M, P, F, True)
        return merge_levels(O, M, F) * I
    if method == NEW_IN_SORT_RS:
        if O <= M:
            return 0.0
        if levels == "real":
            return math.log(1 + O / (2 * M), F) * I
        # discrete passes as the planner counts them: a merge of F runs of
        # size 2M * F^(L-1) must cover the output before the wide step
        return max(1, merge_levels(O, 2 * M, F)) * I
    if method == SORT_SEPARATE:
        if I <= M:
            return 0.0
        if replacement_selection:
            if levels == "real":
                return math.log(1 + I / (2 * M), F) * I
            return merge_levels(2 * M + I, 2 * M, F) * I
        if levels == "real":
            return math.log(I / M, F) * I
        return merge_levels(I, M, F) * I
    # sort with traditional early aggregation; the discrete model follows
    # the worked-example accounting with replacement-selection runs (2M)
    if I <= M:
        return 0.0
    if levels == "real":
        return max(0.0, math.log(O / M, F)) * I + max(0, I - O) / (F - 1)
    return _traditional_step_sim(I, O, M, F, 2 * M)


def predicted_rungen_spill(I, O, M):
    """Total size of all initial runs under early aggregation with
    replacement selection and memory kept full: M + (1 - M/O) * I.
    Zero when the output fits in memory."""
    if O <= M:
        return 0.0
    return M + (1.0 - M / O) * I


def column_access_bounds(N, K, scenario, cache_enabled):
    """Column-access extremes for duplicate removal of N rows of K columns.

    Returns ``((sort_low, sort_high), hash_accesses)``.  Scenarios:
    ``"single_group"`` (output collapses to one row) and ``"distinct"``
    (output has N rows: between a unique leading column and rows differing
    only in the last column).
    """
    if N < 1 or K < 1:
        raise InvalidInputError("need N, K >= 1")
    if scenario == "single_group":
        sort = N * K if cache_enabled else 2 * N * K
        return (sort, sort), 3 * N * K
    if scenario == "distinct":
        if cache_enabled:
            return (N, N * K), N * K
        return (2 * N, 2 * N * K), N * K
    raise InvalidInputError(f"unknown scenario {scenario!r}")


def figure_rows(I, M, P, F, reduction_factors):
    """Model curves across output sizes for the three contenders.

    One dict per reduction factor I/O with discrete-level spill predictions:
    hybrid hash aggregation, new in-sort aggregation (same hybrid memory
    split, plus its replacement-selection variant), and sort with
    traditional early aggregation (full levels plus the optimized-merge
    term).  Used to regenerate the sort-versus-hash comparison curves.
    """
    out = []
    for factor in reduction_factors:
        O = max(1, round(I / factor))
        hash_spill = spill_volume(
            ModelParams(I, O, M, P, HASH, F), hybrid=True)
        new_spill = spill_volume(
            ModelParams(I, O, M, P, NEW_IN_SORT, F), hybrid=True)
        new_rs = spill_volume(ModelParams(I, O, M, P, NEW_IN_SORT_RS, F))
        trad_spill = merge_levels(O, M, F) * I + max(0, I - O) / (F - 1)
        out.append({
            "reduction_factor": factor,
            "I": I, "O": O, "M": M, "P": P, "F": F,
            "hash_hybrid": hash_spill,
            "new_in_sort": new_spill,
            "new_in_sort_replacement_selection": new_rs,
            "sort_traditional_early_agg": trad_spill,
        })
    return out
