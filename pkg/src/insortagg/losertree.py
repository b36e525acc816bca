"""Tree-of-losers (tournament) priority queue.

A balanced binary tree embedded in an array: leaves hold the current entry of
each input slot, every internal node holds the loser of the match between the
winners of its subtrees, and slot 0 of the node array holds the overall
winner.  Replacing the winner and re-establishing the invariant is a single
leaf-to-root pass with one comparison per tree level.

Entries are ``(cohort, row, code)`` tuples:

* ``cohort`` orders run generations in replacement selection (always 0 for a
  plain merge); lower cohorts win outright.
* ``code`` is an optional offset-value code.  In ``classic_codes`` mode two
  present codes decide a match directly (loser re-coded relative to the
  winner); otherwise matches walk the rows' cached code ladders, which is
  base-free and equally cheap once the caches are warm.

``None`` entries are sentinels for exhausted inputs; they lose every match
without charging a comparison.  Ties between equal keys break toward the
lower slot index for deterministic output.
"""

from __future__ import annotations

from . import ovc as _ovc
from .core import compare_rows


class LoserTree:
    def __init__(self, n_inputs, schema, ledger=None, *, use_ovc=False,
                 direction=_ovc.ASCENDING, classic_codes=True,
                 ovc_cache=True):
        if n_inputs < 1:
            n_inputs = 1
        cap = 1
        while cap < n_inputs:
            cap <<= 1
        self.capacity = cap
        self.schema = schema
        self.ledger = ledger
        self.use_ovc = use_ovc
        self.direction = direction
        self.classic_codes = classic_codes
        self.ovc_cache = ovc_cache
        self._entries = [None] * cap
        # node i (1..cap-1) holds the losing slot of its subtree; node 0 the
        # overall winning slot
        self._nodes = [0] * cap
        self._built = False

    def __len__(self):
        return sum(1 for e in self._entries if e is not None)

    def build(self, entries=()):
        """Install entries in slot order and run the initial tournament."""
        entries = list(entries)
        if len(entries) > self.capacity:
            raise ValueError("more entries than slots")
        for i, e in enumerate(entries):
            self._entries[i] = e
        cap = self.capacity
        winners = [0] * (2 * cap)
        for i in range(cap):
            winners[cap + i] = i
        for node in range(cap - 1, 0, -1):
            w, l = self._match(winners[2 * node], winners[2 * node + 1])
            self._nodes[node] = l
            winners[node] = w
        self._nodes[0] = winners[1] if cap > 1 else 0
        self._built = True

    def winner_slot(self):
        return self._nodes[0]

    def winner(self):
        return self._entries[self._nodes[0]]

    def push_and_pop(self, entry):
        """Replace the current winner with ``entry`` and return the popped
        winner after one leaf-to-root repair pass."""
        if not self._built:
            self.build()
        slot = self._nodes[0]
        popped = self._entries[slot]
        self._entries[slot] = entry
        cap = self.capacity
        node = (cap + slot) >> 1
        winner = slot
        while node >= 1:
            w, l = self._match(winner, self._nodes[node])
            self._nodes[node] = l
            winner = w
            node >>= 1
        self._nodes[0] = winner
        return popped

    def _match(self, sa, sb):
        """Play one match between slots; returns (winner_slot, loser_slot)."""
        entries = self._entries
        ea, eb = entries[sa], entries[sb]
        if ea is None or eb is None:
            if ea is None and eb is None:
                return (sa, sb) if sa < sb else (sb, sa)
            return (sb, sa) if ea is None else (sa, sb)
        ledger = self.ledger
        updates = None
        if ea[0] != eb[0]:
            # run-number component decides; still one comparison of work
            if ledger is not None:
                ledger.row_comparisons += 1
            sign = -1 if ea[0] < eb[0] else 1
        elif self.use_ovc:
            ca, cb = ea[2], eb[2]
            if self.classic_codes and ca is not None and cb is not None:
                sign, na, nb = _ovc.compare_with_codes(
                    ea[1], ca, eb[1], cb, self.schema, ledger,
                    use_cache=self.ovc_cache)
                updates = (ca, na, cb, nb)
            else:
                sign, _ = _ovc.ladder_compare(
                    ea[1], eb[1], self.direction, self.schema, ledger,
                    use_cache=self.ovc_cache)
        else:
            sign, _ = compare_rows(ea[1], eb[1], self.schema, ledger)
        if sign == 0:
            sign = -1 if sa < sb else 1
        if updates is not None:
            # re-base the loser's code relative to the winner
            ca, na, cb, nb = updates
            if sign < 0:
                if nb is not cb:
                    entries[sb] = (eb[0], eb[1], nb)
            elif na is not ca:
                entries[sa] = (ea[0], ea[1], na)
        return (sa, sb) if sign < 0 else (sb, sa)
