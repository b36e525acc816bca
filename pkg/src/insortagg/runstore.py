"""Temporary-storage abstraction: paged run files with metadata.

Spill format (little-endian throughout):

* file  = sequence of pages
* page  = 12-byte header (row_count u32, byte_length u32, crc32 u32)
          + serialized high key + serialized rows
* row   = key columns then aggregate-state slots; int64 columns as 8-byte
          signed integers, utf8 columns as u32 length prefix + bytes;
          state slots are always int64.

``byte_length`` covers everything after the header; the crc32 covers the same
bytes.  ``high_key`` is the key of the page's last row (pages of unsorted
hash partitions carry a zero key instead, all columns zero/empty).

Two interchangeable backing stores share this format and the same ledger
accounting: an in-memory store for fast deterministic experiments and a
plain-file store.  The in-memory store can optionally retain decoded row
objects per page, so rows read back keep their cached offset-value codes.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

from .core import (
    INT64,
    CorruptionError,
    InvalidInputError,
    OrderingViolationError,
    Row,
)

_HEADER = struct.Struct("<III")


class RowCodec:
    """Serializer for one schema; precompiles the fast all-integer path."""

    def __init__(self, schema):
        self.schema = schema
        self.arity = schema.arity
        self.slots = schema.state_slots
        self.width = self.arity + self.slots
        self.all_int = all(c.kind == INT64 for c in schema.key_columns)
        if self.all_int:
            self._key_struct = struct.Struct(f"<{self.arity}q")
        self._zero_key = tuple(
            0 if c.kind == INT64 else "" for c in schema.key_columns
        )

    # -- keys ---------------------------------------------------------------

    def encode_key(self, key):
        if self.all_int:
            return self._key_struct.pack(*key)
        parts = []
        for col, v in zip(self.schema.key_columns, key):
            if col.kind == INT64:
                parts.append(struct.pack("<q", v))
            else:
                b = v.encode("utf-8")
                parts.append(struct.pack("<I", len(b)) + b)
        return b"".join(parts)

    def decode_key(self, data, offset=0):
        if self.all_int:
            end = offset + self._key_struct.size
            return tuple(self._key_struct.unpack_from(data, offset)), end
        vals = []
        for col in self.schema.key_columns:
            if col.kind == INT64:
                vals.append(struct.unpack_from("<q", data, offset)[0])
                offset += 8
            else:
                (n,) = struct.unpack_from("<I", data, offset)
                offset += 4
                vals.append(data[offset:offset + n].decode("utf-8"))
                offset += n
        return tuple(vals), offset

    def zero_key_bytes(self):
        return self.encode_key(self._zero_key)

    # -- rows ---------------------------------------------------------------

    def encode_rows(self, rows):
        if self.all_int:
            flat = []
            for r in rows:
                flat.extend(r.key)
                flat.extend(r.state)
            return struct.pack(f"<{len(flat)}q", *flat)
        parts = []
        for r in rows:
            parts.append(self.encode_key(r.key))
            if self.slots:
                parts.append(struct.pack(f"<{self.slots}q", *r.state))
        return b"".join(parts)

    def decode_rows(self, data, offset, count):
        arity, slots, width = self.arity, self.slots, self.width
        rows = []
        if self.all_int:
            flat = struct.unpack_from(f"<{count * width}q", data, offset)
            for i in range(0, count * width, width):
                rows.append(Row(flat[i:i + arity], flat[i + arity:i + width]))
            return rows
        for _ in range(count):
            key, offset = self.decode_key(data, offset)
            state = struct.unpack_from(f"<{slots}q", data, offset)
            offset += 8 * slots
            rows.append(Row(key, state))
        return rows


def build_page(codec, rows, zero_high_key=False):
    if not rows:
        raise InvalidInputError("a page needs at least one row")
    if zero_high_key:
        hk = codec.zero_key_bytes()
    else:
        hk = codec.encode_key(rows[-1].key)
    body = hk + codec.encode_rows(rows)
    header = _HEADER.pack(len(rows), len(body), zlib.crc32(body) & 0xFFFFFFFF)
    return header + body


def parse_page(codec, data):
    """Decode one page; returns (rows, high_key). Verifies length and crc."""
    row_count, byte_length, crc = _HEADER.unpack_from(data, 0)
    body = data[_HEADER.size:_HEADER.size + byte_length]
    if len(body) != byte_length:
        raise CorruptionError("truncated page body")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptionError("page checksum mismatch")
    high_key, offset = codec.decode_key(body, 0)
    rows = codec.decode_rows(body, offset, row_count)
    return rows, high_key


@dataclass
class RunMeta:
    """Metadata of one immutable sorted run (or unsorted partition file)."""

    run_id: int
    row_count: int
    page_count: int
    min_key: tuple | None
    max_key: tuple | None
    level: int = 0


class MemoryStore:
    """Simulated temporary storage: pages held as bytes in memory.

    With ``retain_rows`` the decoded row objects of every page are kept and
    handed back by ``read_page``, preserving per-row offset-value code caches
    across the spill round trip (I/O accounting is unchanged).
    """

    def __init__(self, retain_rows=False):
        self.retain_rows = retain_rows
        self._pages = {}
        self._rows = {}
        self._next = 0

    def new_run(self):
        rid = self._next
        self._next += 1
        self._pages[rid] = []
        return rid

    def append_page(self, run_id, page, rows=None):
        self._pages[run_id].append(page)
        if self.retain_rows and rows is not None:
            self._rows[(run_id, len(self._pages[run_id]) - 1)] = rows

    def finalize_run(self, run_id):
        pass

    def page_bytes(self, run_id, index):
        return self._pages[run_id][index]

    def retained(self, run_id, index):
        return self._rows.get((run_id, index))

    def total_bytes(self):
        return sum(len(p) for pages in self._pages.values() for p in pages)


class FileStore:
    """Temporary storage backed by one file per run in a directory."""

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self._offsets = {}
        self._handles = {}
        self._next = 0

    def _path(self, run_id):
        return os.path.join(self.directory, f"run_{run_id:06d}.bin")

    def new_run(self):
        rid = self._next
        self._next += 1
        self._offsets[rid] = []
        self._handles[rid] = open(self._path(rid), "wb")
        return rid

    def append_page(self, run_id, page, rows=None):
        fh = self._handles[run_id]
        self._offsets[run_id].append((fh.tell(), len(page)))
        fh.write(page)

    def finalize_run(self, run_id):
        fh = self._handles.pop(run_id, None)
        if fh is not None:
            fh.close()

    def page_bytes(self, run_id, index):
        off, length = self._offsets[run_id][index]
        with open(self._path(run_id), "rb") as fh:
            fh.seek(off)
            return fh.read(length)

    def retained(self, run_id, index):
        return None

    def close(self):
        for rid in list(self._handles):
            self.finalize_run(rid)


class RunWriter:
    """Streaming writer: buffers rows into pages, tracks run metadata.

    ``sorted_check`` verifies every adjacent pair is non-descending (strictly
    ascending with ``strict_unique``); the check is an assertion on the data
    and charges nothing to the ledger.
    """

    def __init__(self, store, codec, page_capacity, ledger=None, *, level=0,
                 sorted_check=True, strict_unique=False, zero_high_key=False):
        if page_capacity < 1:
            raise InvalidInputError("page capacity must be positive")
        self.store = store
        self.codec = codec
        self.page_capacity = page_capacity
        self.ledger = ledger
        self.level = level
        self.sorted_check = sorted_check
        self.strict_unique = strict_unique
        self.zero_high_key = zero_high_key
        self.run_id = store.new_run()
        self._buf = []
        self._prev_key = None
        self.row_count = 0
        self.page_count = 0
        self.min_key = None
        self.max_key = None

    def add(self, row):
        key = row.key
        if self.sorted_check and self._prev_key is not None:
            if key < self._prev_key or (self.strict_unique
                                        and key == self._prev_key):
                raise OrderingViolationError(
                    f"run rows out of order: {key!r} after {self._prev_key!r}"
                )
        self._prev_key = key
        if self.min_key is None:
            self.min_key = key
        self.max_key = key
        self._buf.append(row)
        self.row_count += 1
        if len(self._buf) >= self.page_capacity:
            self._flush()

    def _flush(self):
        rows = self._buf
        page = build_page(self.codec, rows, self.zero_high_key)
        self.store.append_page(self.run_id, page, rows)
        self._buf = []
        self.page_count += 1
        if self.ledger is not None:
            self.ledger.pages_written += 1
            self.ledger.rows_spilled += len(rows)

    def close(self):
        if self._buf:
            self._flush()
        if self.row_count == 0:
            raise InvalidInputError("refusing to write an empty run")
        self.store.finalize_run(self.run_id)
        return RunMeta(self.run_id, self.row_count, self.page_count,
                       self.min_key, self.max_key, self.level)


def write_run(rows, store, codec, page_capacity, ledger=None, *, level=0,
              sorted_check=True, strict_unique=False, zero_high_key=False):
    """Write an ascending row stream as one paged run; returns its RunMeta."""
    writer = RunWriter(store, codec, page_capacity, ledger, level=level,
                       sorted_check=sorted_check, strict_unique=strict_unique,
                       zero_high_key=zero_high_key)
    for row in rows:
        writer.add(row)
    return writer.close()


def read_page(store, codec, meta, index, ledger=None):
    """Read one page of a run; returns its rows in on-page order."""
    if index < 0 or index >= meta.page_count:
        raise InvalidInputError(
            f"page {index} out of range for run {meta.run_id} "
            f"({meta.page_count} pages)")
    rows = store.retained(meta.run_id, index)
    if rows is None:
        rows, _ = parse_page(codec, store.page_bytes(meta.run_id, index))
    if ledger is not None:
        ledger.pages_read += 1
        ledger.rows_read_back += len(rows)
    return rows


def iter_run(store, codec, meta, ledger=None, start_page=0):
    """Yield a run's rows in order, reading page by page."""
    for i in range(start_page, meta.page_count):
        yield from read_page(store, codec, meta, i, ledger)
