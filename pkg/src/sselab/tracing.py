"""Simulated server memory with per-operation access tracing.

A ``PageStore`` is a flat array of 8-byte words grouped into fixed-size
pages. Every read/write range between ``begin_op`` and ``end_op`` is
recorded, and the derived measurements (disjoint-interval count, words
read, pages touched) are computed exactly from the trace.

Locality here counts both read and write ranges; ``read_locality`` gives
the read-only figure so both conventions are available to tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import NestedOp, OutOfBounds
from .params import WORD_BYTES

READ = "read"
WRITE = "write"


@dataclass(frozen=True)
class OpMetrics:
    op_id: int
    label: str
    locality: int
    read_locality: int
    read_words: int
    write_words: int
    page_pattern: frozenset
    pages_touched: int


@dataclass
class EfficiencyReport:
    max_locality: int
    max_read_efficiency: float
    max_page_efficiency: float
    storage_efficiency: float


def _merged_interval_count(ranges) -> int:
    """Number of maximal disjoint word intervals; touching ranges merge."""
    if not ranges:
        return 0
    spans = sorted((start, start + length) for start, length in ranges)
    count = 0
    cur_end = None
    for start, end in spans:
        if cur_end is None or start > cur_end:
            count += 1
            cur_end = end
        else:
            cur_end = max(cur_end, end)
    return count


def metrics_from_ranges(op_id: int, label: str, ranges, page_size: int) -> OpMetrics:
    """Pure function of a recorded trace slice; replaying reproduces it."""
    reads = [(s, ln) for s, ln, kind in ranges if kind == READ]
    pages = set()
    for start, length, _ in ranges:
        if length:
            pages.update(range(start // page_size, (start + length - 1) // page_size + 1))
    return OpMetrics(
        op_id=op_id,
        label=label,
        locality=_merged_interval_count([(s, ln) for s, ln, _ in ranges]),
        read_locality=_merged_interval_count(reads),
        read_words=sum(ln for _, ln in reads),
        write_words=sum(ln for s, ln, kind in ranges if kind == WRITE),
        page_pattern=frozenset(pages),
        pages_touched=len(pages),
    )


class PageStore:
    """Array of ``num_pages`` pages of ``page_size`` words each."""

    def __init__(self, page_size: int, num_pages: int):
        if page_size < 1 or num_pages < 0:
            raise ValueError("bad store geometry")
        self.page_size = page_size
        self.num_pages = num_pages
        self.words = page_size * num_pages
        self.backing = np.zeros(self.words, dtype=np.uint64)
        self._open_op = None  # (op_id, label, first_range_index)
        self._next_op = 0
        self.trace: list[tuple[int, str, int, int, str]] = []  # op, label, start, len, kind
        self.metrics_log: list[OpMetrics] = []

    # -- op lifecycle ----------------------------------------------------
    def begin_op(self, label: str) -> int:
        if self._open_op is not None:
            raise NestedOp(f"op {self._open_op[0]} still open")
        op_id = self._next_op
        self._next_op += 1
        self._open_op = (op_id, label, len(self.trace))
        return op_id

    def end_op(self, op_id: int) -> OpMetrics:
        if self._open_op is None or self._open_op[0] != op_id:
            raise NestedOp(f"op {op_id} is not the open op")
        _, label, first = self._open_op
        self._open_op = None
        ranges = [(s, ln, kind) for _, _, s, ln, kind in self.trace[first:]]
        metrics = metrics_from_ranges(op_id, label, ranges, self.page_size)
        self.metrics_log.append(metrics)
        return metrics

    def _record(self, kind: str, start: int, length: int):
        if self._open_op is None:
            raise NestedOp("no open op")
        if length == 0:
            return
        if start < 0 or start + length > self.words:
            raise OutOfBounds(f"[{start}, {start + length}) outside store of {self.words} words")
        op_id, label, _ = self._open_op
        self.trace.append((op_id, label, start, length, kind))

    # -- word access -----------------------------------------------------
    def read_range(self, start: int, length: int) -> np.ndarray:
        self._record(READ, start, length)
        return self.backing[start : start + length].copy()

    def write_range(self, start: int, words) -> None:
        words = np.asarray(words, dtype=np.uint64)
        self._record(WRITE, start, len(words))
        self.backing[start : start + len(words)] = words

    # -- byte-blob convenience (blobs are stored little-endian per word) --
    def write_blob(self, start: int, blob: bytes) -> None:
        nwords = (len(blob) + WORD_BYTES - 1) // WORD_BYTES
        padded = blob + b"\x00" * (nwords * WORD_BYTES - len(blob))
        self.write_range(start, np.frombuffer(padded, dtype="<u8"))

    def read_blob(self, start: int, nbytes: int) -> bytes:
        nwords = (nbytes + WORD_BYTES - 1) // WORD_BYTES
        return self.read_range(start, nwords).astype("<u8").tobytes()[:nbytes]

    # -- reporting --------------------------------------------------------
    def dump_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["op_id", "label", "kind", "start", "len"])
            for op_id, label, start, length, kind in self.trace:
                writer.writerow([op_id, label, kind, start, length])

    def dump_metrics_csv(self, path, answer_words=None) -> None:
        answer_words = answer_words or {}
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["op_id", "label", "locality", "read_words", "pages", "answer_words"])
            for m in self.metrics_log:
                writer.writerow(
                    [m.op_id, m.label, m.locality, m.read_words, m.pages_touched,
                     answer_words.get(m.op_id, "")]
                )


@dataclass
class Region:
    name: str
    start: int
    words: int

    @property
    def end(self) -> int:
        return self.start + self.words


class RegionPlan:
    """Sequential page-aligned region layout; build before the store."""

    def __init__(self, page_size: int):
        self.page_size = page_size
        self._cursor = 0
        self.regions: dict[str, Region] = {}

    def add(self, name: str, words: int, page_align: bool = True) -> Region:
        if page_align:
            self._cursor = ((self._cursor + self.page_size - 1) // self.page_size) * self.page_size
        region = Region(name, self._cursor, words)
        self._cursor += words
        if name in self.regions:
            raise ValueError(f"duplicate region {name}")
        self.regions[name] = region
        return region

    @property
    def total_words(self) -> int:
        return self._cursor

    def build_store(self) -> PageStore:
        pages = (self.total_words + self.page_size - 1) // self.page_size
        return PageStore(self.page_size, pages)


def summarize(metrics, answer_words, page_size, store_words_in_use, plaintext_words) -> EfficiencyReport:
    """Fold per-op metrics into the worst-case efficiency figures.

    read efficiency  = read_words / max(1, answer)
    page efficiency  = pages_touched / ceil(answer / page_size)
    storage efficiency = store words in use / plaintext words
    """
    max_loc = 0
    max_read = 0.0
    max_page = 0.0
    for m, answer in zip(metrics, answer_words):
        max_loc = max(max_loc, m.locality)
        denom_words = max(1, answer)
        max_read = max(max_read, m.read_words / denom_words)
        denom_pages = max(1, -(-answer // page_size))
        max_page = max(max_page, m.pages_touched / denom_pages)
    storage = store_words_in_use / max(1, plaintext_words)
    return EfficiencyReport(max_loc, max_read, max_page, storage)
