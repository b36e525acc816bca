"""Ordered in-memory index with a bounded row budget and an eviction cursor.

The index absorbs duplicate keys immediately (one search either finds the
match or the insertion point) and supports in-order eviction from its low
end, which is how runs leave memory during run generation and how finalized
output leaves during wide merging.

Layout: a two-level b-tree.  A root array of per-leaf minimum keys is
searched first, then the target leaf; leaves split at a fixed capacity.
Searches are binary by default; an interpolation probe on the leading integer
column can be enabled when keys are near-uniform (e.g. hash values).

Search comparisons are charged to the ledger analytically with the exact
count a binary search of the node performs (``floor(log2(n)) + 1``), plus one
equality check.  Column accesses for those comparisons are charged at two per
comparison, the cost of a comparison deciding on the leading column.

Replacement selection uses two generations: rows whose key is at or below the
eviction cursor belong to the next run and are kept in a separate tree.  A
lookup probes the current generation first, then (for keys the cursor has
passed) the next generation.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right, insort
from enum import Enum

from .core import InvalidInputError


class InsertOutcome(Enum):
    ABSORBED = "absorbed"
    INSERTED = "inserted"
    NEEDS_EVICTION = "needs_eviction"


class _Tree:
    """One generation: parallel per-leaf key/state lists plus a root of
    leaf minimum keys."""

    __slots__ = ("leaf_capacity", "interpolation", "keys", "vals", "mins",
                 "size")

    def __init__(self, leaf_capacity, interpolation):
        self.leaf_capacity = leaf_capacity
        self.interpolation = interpolation
        self.keys = []  # list of leaves; each leaf a sorted list of keys
        self.vals = []  # parallel list of state lists
        self.mins = []  # min key per leaf
        self.size = 0

    def _locate(self, key, ledger):
        """Find (leaf_index, position, found); charges search comparisons."""
        mins = self.mins
        li = bisect_right(mins, key) - 1
        if li < 0:
            li = 0
        leaf = self.keys[li]
        if self.interpolation and isinstance(key[0], int):
            pos, probes = self._interpolate(leaf, key)
        else:
            pos = bisect_left(leaf, key)
            probes = len(leaf).bit_length()
        if ledger is not None:
            comparisons = len(mins).bit_length() + probes + 1
            ledger.row_comparisons += comparisons
            ledger.column_value_accesses += 2 * comparisons
        found = pos < len(leaf) and leaf[pos] == key
        return li, pos, found

    def _interpolate(self, leaf, key):
        """Interpolation probe on the leading column, then a narrowed binary
        search; returns (position, probe_count)."""
        n = len(leaf)
        if n == 0:
            return 0, 1
        lo_v, hi_v = leaf[0][0], leaf[-1][0]
        if hi_v <= lo_v:
            pos = bisect_left(leaf, key)
            return pos, n.bit_length()
        frac = (key[0] - lo_v) / (hi_v - lo_v)
        guess = int(frac * (n - 1))
        guess = 0 if guess < 0 else (n - 1 if guess > n - 1 else guess)
        probes = 1
        # widen a bracket around the guess, then binary-search inside it
        lo, hi = guess, guess + 1
        step = 1
        while lo > 0 and leaf[lo - 1] >= key:
            lo = max(0, lo - step)
            step <<= 1
            probes += 1
        step = 1
        while hi < n and leaf[hi - 1] < key:
            hi = min(n, hi + step)
            step <<= 1
            probes += 1
        pos = bisect_left(leaf, key, lo, hi)
        probes += max(0, (hi - lo).bit_length())
        return pos, probes

    def insert_at(self, li, pos, key, state):
        leaf = self.keys[li]
        leaf.insert(pos, key)
        self.vals[li].insert(pos, state)
        if pos == 0:
            self.mins[li] = key
        self.size += 1
        if len(leaf) > self.leaf_capacity:
            half = len(leaf) // 2
            self.keys.insert(li + 1, leaf[half:])
            self.vals.insert(li + 1, self.vals[li][half:])
            del leaf[half:]
            del self.vals[li][half:]
            self.mins.insert(li + 1, self.keys[li + 1][0])

    def insert_first(self, key, state):
        self.keys.append([key])
        self.vals.append([state])
        self.mins.append(key)
        self.size += 1

    def evict_front(self, count):
        """Remove and return up to ``count`` lowest entries, in key order."""
        out = []
        while count > 0 and self.keys:
            leaf_keys = self.keys[0]
            leaf_vals = self.vals[0]
            if len(leaf_keys) <= count:
                out.extend(zip(leaf_keys, leaf_vals))
                count -= len(leaf_keys)
                self.size -= len(leaf_keys)
                del self.keys[0], self.vals[0], self.mins[0]
            else:
                out.extend(zip(leaf_keys[:count], leaf_vals[:count]))
                del leaf_keys[:count], leaf_vals[:count]
                self.mins[0] = leaf_keys[0]
                self.size -= count
                count = 0
        return out

    def pop_below(self, watermark):
        """Remove and return all entries with key strictly below watermark."""
        out = []
        while self.keys:
            leaf_keys = self.keys[0]
            if leaf_keys[-1] < watermark:
                out.extend(zip(leaf_keys, self.vals[0]))
                self.size -= len(leaf_keys)
                del self.keys[0], self.vals[0], self.mins[0]
                continue
            cut = bisect_left(leaf_keys, watermark)
            if cut:
                out.extend(zip(leaf_keys[:cut], self.vals[0][:cut]))
                del leaf_keys[:cut], self.vals[0][:cut]
                self.mins[0] = leaf_keys[0]
                self.size -= cut
            break
        return out

    def entries(self):
        for lk, lv in zip(self.keys, self.vals):
            yield from zip(lk, lv)

    def min_key(self):
        return self.mins[0] if self.mins else None


class OrderedIndex:
    """Sorted key -> candidate-output-row map with a row budget.

    ``insert_or_aggregate`` never exceeds the budget: when the key is new and
    the budget is full it reports NEEDS_EVICTION without modifying anything;
    the operator owns the eviction/spill schedule.
    """

    def __init__(self, budget, merge_fn, ledger=None, *, leaf_capacity=64,
                 interpolation=False, generations=False):
        if budget < 1:
            raise InvalidInputError("index budget must be at least one row")
        self.budget = budget
        self.merge_fn = merge_fn
        self.ledger = ledger
        self.generation = 0
        self.generations_enabled = generations
        self.cursor = None  # key of the last row evicted in this generation
        self._cur = _Tree(leaf_capacity, interpolation)
        self._next = _Tree(leaf_capacity, interpolation) if generations else None

    @property
    def resident_rows(self):
        n = self._cur.size
        if self._next is not None:
            n += self._next.size
        return n

    def insert_or_aggregate(self, key, state):
        """Absorb ``state`` into the row with ``key`` or insert a new row.

        One descent finds either the match or the insertion point.  With
        generations enabled, the current generation is probed first; keys the
        eviction cursor has already passed are then probed in (and inserted
        into) the next generation.
        """
        ledger = self.ledger
        passed = (self.generations_enabled and self.cursor is not None
                  and key <= self.cursor)
        if not passed:
            tree = self._cur
            if tree.size:
                li, pos, found = tree._locate(key, ledger)
                if found:
                    tree.vals[li][pos] = self.merge_fn(
                        tree.vals[li][pos], state)
                    return InsertOutcome.ABSORBED
            else:
                li = pos = 0
        else:
            # evicted from the current generation already; only the next
            # generation can hold a live copy
            tree = self._next
            if tree.size:
                li, pos, found = tree._locate(key, ledger)
                if found:
                    tree.vals[li][pos] = self.merge_fn(
                        tree.vals[li][pos], state)
                    return InsertOutcome.ABSORBED
            else:
                li = pos = 0
        if self.resident_rows >= self.budget:
            return InsertOutcome.NEEDS_EVICTION
        if tree.size == 0:
            tree.insert_first(key, state)
        else:
            tree.insert_at(li, pos, key, state)
        return InsertOutcome.INSERTED

    def evict_range(self, target_rows):
        """Remove up to ``target_rows`` rows from the low end of the current
        generation, in ascending key order; advances the eviction cursor.

        May return fewer rows than asked when the current generation runs
        out; the caller then closes the run and calls advance_generation().
        """
        if target_rows <= 0:
            raise InvalidInputError("eviction size must be positive")
        out = self._cur.evict_front(target_rows)
        if out:
            self.cursor = out[-1][0]
        return out

    def current_generation_empty(self):
        return self._cur.size == 0

    def advance_generation(self):
        """Start the next run epoch: the next generation becomes current."""
        if self._cur.size:
            raise InvalidInputError("current generation still holds rows")
        if self._next is None:
            raise InvalidInputError("generations are not enabled")
        self._cur, self._next = self._next, self._cur
        self.cursor = None
        self.generation += 1

    def pop_finalized_below(self, watermark):
        """Remove and return all rows with key strictly below ``watermark``.

        Used by wide merging: keys below the lowest frontier of the merge
        inputs can no longer receive contributions and are final.
        """
        if watermark is None:
            return []
        return self._cur.pop_below(watermark)

    def evict_all(self):
        """Drain every resident row in ascending key order (single
        generation only: read-sort-write flush or final drain)."""
        out = list(self._cur.entries())
        if self._next is not None and self._next.size:
            raise InvalidInputError(
                "evict_all with a non-empty next generation; drain the "
                "current generation and advance first")
        self._cur = _Tree(self._cur.leaf_capacity, self._cur.interpolation)
        self.cursor = None
        return out

    def entries(self):
        """Iterate (key, state) of the current generation in key order."""
        return self._cur.entries()

    def min_key(self):
        return self._cur.min_key()

    def check_sorted(self):
        """Debug invariant: in-order traversal strictly increasing per
        generation; resident count within budget."""
        for tree in (self._cur, self._next):
            if tree is None:
                continue
            prev = None
            for key, _ in tree.entries():
                assert prev is None or prev < key, "index order violated"
                prev = key
        assert self.resident_rows <= self.budget, "index budget exceeded"
