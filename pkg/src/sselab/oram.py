"""Hierarchical read-only oblivious memory with counter-scheduled rebuilds.

A constant number ``c`` of levels: level 1 is a small array scanned whole
on every access; level ``i`` holds up to ``ceil(n^(i/c))`` blocks at
positions drawn by a fresh keyed permutation per epoch, plus a reserve of
dummy positions so that every access reads exactly one never-before-read
position per level. Small index tables (downloaded and re-encrypted whole
each access, like the level-1 array) say where a block last landed. After
``ceil(n^((i-1)/c))`` reads, level ``i`` is rebuilt: every block accessed
in its window is re-permuted into it with a fresh key via a data-oblivious
external-memory sort, and everything below is emptied. Values never change
(read-only), so the top level rebuilds from a pristine encrypted copy of
the original memory.

Access cost: one linear scan of level 1, the index tables, one block per
higher level; rebuild cost amortizes to a constant number of extra
contiguous intervals per access.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import crypto
from .crypto import KeyChain, SmallDomainPrp
from .errors import BlockTooSmall, IndexOutOfRange, WorkbenchError
from .params import WORD_BYTES, ceil_root_pow, next_pow2
from .tracing import PageStore, RegionPlan


@dataclass(frozen=True)
class OramParams:
    n: int  # number of blocks, keys 1..n
    c: int  # level count, >= 2
    beta: int = None  # type: ignore[assignment]  # words per block

    def __post_init__(self):
        if self.n < 2 or self.c < 2:
            raise WorkbenchError("need n >= 2 and c >= 2")
        bound = ceil_root_pow(self.n, self.c - 1, self.c)
        if self.beta is None:
            object.__setattr__(self, "beta", bound)
        if self.beta < bound:
            raise BlockTooSmall(f"beta {self.beta} below n^((c-1)/c) = {bound}")

    def pow_(self, i: int) -> int:
        return ceil_root_pow(self.n, i, self.c)

    def real_slots(self, level: int) -> int:
        return self.n if level == self.c else self.pow_(level)

    def dummy_slots(self, level: int) -> int:
        # +1: the access that trips the rebuild still needs a fresh dummy
        return self.pow_(level - 1) + 1

    def level_slots(self, level: int) -> int:
        return self.real_slots(level) + self.dummy_slots(level)

    def trigger(self, level: int) -> int:
        return self.pow_(level - 1)

    @property
    def record_words(self) -> int:
        # sort key word + block key word + value words
        return 1 + self.beta

    @property
    def record_stride(self) -> int:
        return self.record_words + crypto.PAD_OVERHEAD // WORD_BYTES

    @property
    def scan_slots(self) -> int:
        return self.pow_(1) + 1

    @property
    def chunk_records(self) -> int:
        lg = max(1.0, math.log2(self.n))
        return max(1, math.ceil(self.pow_(1) * lg * lg))


PAD_KEY_BASE = 1 << 62  # sort keys for pow2 padding records; beyond any slot


def oblivious_sort(store: PageStore, base: int, count: int, stride: int, chunk: int,
                   load_fn, store_fn) -> int:
    """Sort ``count`` (a power of two) records in place by their key word.

    The compare-exchange schedule and the chunk I/O sequence are functions
    of ``count`` and ``chunk`` alone, never of the data. ``load_fn(start,
    k)`` decrypts records [start, start+k) into (key, record) pairs;
    ``store_fn(start, recs)`` re-encrypts and writes them back. Returns the
    number of chunk I/O operations.
    """
    if count & (count - 1):
        raise WorkbenchError("record count must be a power of two")
    io = 0
    if count <= 4 * chunk:
        # whole region fits the allowed local memory: one read, one write,
        # network applied in memory
        recs = load_fn(base, count)
        io += -(-count // chunk)
        k = 2
        while k <= count:
            j = k // 2
            while j >= 1:
                for i in range(count):
                    partner = i ^ j
                    if partner > i:
                        ascending = (i & k) == 0
                        if (recs[i][0] > recs[partner][0]) == ascending:
                            recs[i], recs[partner] = recs[partner], recs[i]
                j //= 2
            k *= 2
        store_fn(base, recs)
        io += -(-count // chunk)
        return io
    # chunked passes: spans below the chunk size stay chunk-local, larger
    # spans pair aligned chunks
    num_chunks = count // chunk
    k = 2
    while k <= count:
        j = k // 2
        while j >= 1:
            if j < chunk:
                for q in range(num_chunks):
                    start = base + q * chunk * stride
                    recs = load_fn(start, chunk)
                    io += 1
                    off = q * chunk
                    for i in range(chunk):
                        partner = i ^ j
                        if partner > i:
                            ascending = ((off + i) & k) == 0
                            if (recs[i][0] > recs[partner][0]) == ascending:
                                recs[i], recs[partner] = recs[partner], recs[i]
                    store_fn(start, recs)
                    io += 1
            else:
                jump = j // chunk
                for q in range(num_chunks):
                    if q & jump:
                        continue
                    q2 = q | jump
                    s1 = base + q * chunk * stride
                    s2 = base + q2 * chunk * stride
                    r1 = load_fn(s1, chunk)
                    r2 = load_fn(s2, chunk)
                    io += 2
                    off = q * chunk
                    for i in range(chunk):
                        ascending = ((off + i) & k) == 0
                        if (r1[i][0] > r2[i][0]) == ascending:
                            r1[i], r2[i] = r2[i], r1[i]
                    store_fn(s1, r1)
                    store_fn(s2, r2)
                    io += 2
            j //= 2
        k *= 2
    return io


class ReadOnlyOram:
    """Client and simulated server in one object; the store is the server."""

    def __init__(self, params: OramParams, chain: KeyChain, memory: dict):
        """``memory`` maps block keys 1..n to value word lists (beta-1 words)."""
        self.params = params
        self.chain = chain
        self.enc = chain.enc_key("blocks")
        p = params

        plan = RegionPlan(page_size=max(16, p.record_stride))
        self.regions = {}
        self.regions["pristine"] = plan.add("pristine", p.n * p.record_stride)
        for i in range(2, p.c + 1):
            self.regions[f"A{i}"] = plan.add(f"A{i}", next_pow2(p.level_slots(i)) * p.record_stride)
        a1_plain = p.scan_slots * p.beta * WORD_BYTES
        self.regions["A1"] = plan.add("A1", (a1_plain + crypto.PAD_OVERHEAD) // WORD_BYTES)
        self._a1_plain = a1_plain
        for i in range(2, p.c):
            self.regions[f"R{i}"] = plan.add(f"R{i}", (p.pow_(i) + 1) * p.record_stride)
            t_plain = 4 * (p.n + 1)
            self.regions[f"T{i}"] = plan.add(f"T{i}", -(-(t_plain + crypto.PAD_OVERHEAD) // WORD_BYTES))
        self.store = plan.build_store()

        self.cnt = {i: 0 for i in range(2, p.c + 1)}
        self.epoch = {i: 0 for i in range(2, p.c + 1)}
        self.prp = {}
        self.r_count = {i: 0 for i in range(2, p.c)}
        self.io_blocks = 0  # words moved / beta, cumulative
        self.rebuild_log: list[tuple[int, int]] = []  # (op_id, level)
        self._fresh: dict[int, set] = {i: set() for i in range(2, p.c + 1)}

        if sorted(memory) != list(range(1, p.n + 1)):
            raise WorkbenchError("memory must map keys 1..n")
        self._install(memory)

    # -- crypto plumbing -----------------------------------------------------
    def _prp(self, level: int) -> SmallDomainPrp:
        key = (level, self.epoch[level])
        got = self.prp.get(key)
        if got is None:
            got = SmallDomainPrp(
                self.chain.prf_key(f"prp/{level}/epoch/{self.epoch[level]}"),
                self.params.level_slots(level),
            )
            self.prp[key] = got
        return self.prp[key]

    def _slot_of(self, level: int, x: int) -> int:
        return self._prp(level).eval(x)

    def _enc_record(self, sort_key: int, block_key: int, value: list) -> bytes:
        plain = np.array([sort_key, block_key] + list(value), dtype="<u8").tobytes()
        return crypto.encrypt_padded(self.enc, plain, self.params.record_words * WORD_BYTES).blob

    def _dec_record(self, blob: bytes) -> tuple[int, int, list]:
        words = np.frombuffer(crypto.decrypt_padded(self.enc, blob), dtype="<u8").tolist()
        return words[0], words[1], words[2:]

    def _read_record(self, region: str, slot: int) -> tuple[int, int, list]:
        stride = self.params.record_stride
        base = self.regions[region].start
        blob = self.store.read_blob(base + slot * stride, stride * WORD_BYTES)
        return self._dec_record(blob)

    def _write_record(self, region: str, slot: int, blob: bytes) -> None:
        stride = self.params.record_stride
        self.store.write_blob(self.regions[region].start + slot * stride, blob)

    # -- level-1 scan array and index tables -----------------------------------
    def _read_a1(self) -> list:
        blob = self.store.read_blob(self.regions["A1"].start,
                                    self._a1_plain + crypto.PAD_OVERHEAD)
        words = np.frombuffer(crypto.decrypt_padded(self.enc, blob), dtype="<u8").tolist()
        beta = self.params.beta
        return [
            (words[i * beta], words[i * beta + 1 : (i + 1) * beta])
            for i in range(self.params.scan_slots)
        ]

    def _write_a1(self, slots: list) -> None:
        flat = []
        for key, value in slots:
            flat.append(key)
            flat.extend(value)
        plain = np.array(flat, dtype="<u8").tobytes()
        blob = crypto.encrypt_padded(self.enc, plain, self._a1_plain).blob
        self.store.write_blob(self.regions["A1"].start, blob)

    def _read_table(self, level: int) -> np.ndarray:
        region = self.regions[f"T{level}"]
        blob = self.store.read_blob(region.start, 4 * (self.params.n + 1) + crypto.PAD_OVERHEAD)
        plain = crypto.decrypt_padded(self.enc, blob)
        return np.frombuffer(plain, dtype="<u4").copy()

    def _write_table(self, level: int, table: np.ndarray) -> None:
        region = self.regions[f"T{level}"]
        blob = crypto.encrypt_padded(self.enc, table.astype("<u4").tobytes(),
                                     4 * (self.params.n + 1)).blob
        self.store.write_blob(region.start, blob)

    # -- construction ------------------------------------------------------------
    def _install(self, memory: dict) -> None:
        p = self.params
        op = self.store.begin_op("init")
        for k in range(1, p.n + 1):
            value = list(memory[k])
            if len(value) != p.beta - 1:
                raise WorkbenchError("values must be beta-1 words")
            self._write_record("pristine", k - 1, self._enc_record(0, k, value))
        self._rebuild_into(p.c)
        self._empty_below(p.c)
        self.store.end_op(op)

    # -- rebuilds ------------------------------------------------------------------
    def _rebuild_into(self, level: int) -> None:
        """Re-permute every pending block into ``level`` with a fresh key."""
        p = self.params
        self.epoch[level] += 1
        self.cnt[level] = 0
        self._fresh[level] = set()
        prp_cache_keys = [k for k in self.prp if k[0] == level and k[1] != self.epoch[level]]
        for k in prp_cache_keys:
            del self.prp[k]

        slots = p.level_slots(level)
        padded = next_pow2(slots)
        if level == p.c:
            source_region, source_count = "pristine", p.n
        else:
            source_region, source_count = f"R{level}", self.r_count[level]
        region = f"A{level}"
        # tagging pass: each record gets its target slot as sort key
        out = []
        for j in range(padded):
            if j < source_count:
                _, key, value = self._read_record(source_region, j)
                sort_key = self._slot_of(level, j)
            elif j < slots:
                key, value = 0, [0] * (p.beta - 1)
                sort_key = self._slot_of(level, j)
            else:
                key, value = 0, [0] * (p.beta - 1)
                sort_key = PAD_KEY_BASE + j
            out.append(self._enc_record(sort_key, key, value))
        self.store.write_blob(self.regions[region].start, b"".join(out))
        stride = p.record_stride

        def load_fn(start_addr, k):
            out = []
            raw = self.store.read_range(start_addr, k * stride).astype("<u8").tobytes()
            for idx in range(k):
                rec = self._dec_record(raw[idx * stride * WORD_BYTES : (idx + 1) * stride * WORD_BYTES])
                out.append((rec[0], rec))
            return out

        def store_fn(start_addr, recs):
            blob = b"".join(self._enc_record(*rec) for _, rec in recs)
            self.store.write_blob(start_addr, blob)

        oblivious_sort(self.store, self.regions[region].start, padded, stride,
                       self.params.chunk_records, load_fn, store_fn)

    def _empty_below(self, level: int) -> None:
        p = self.params
        for j in range(2, level):
            # lower levels refill with fresh dummy records: dummy probes
            # against an emptied level must still decrypt
            self.epoch[j] += 1
            self.cnt[j] = 0
            self.r_count[j] = 0
            self._fresh[j] = set()
            padded = next_pow2(p.level_slots(j))
            blob = b"".join(
                self._enc_record(s, 0, [0] * (p.beta - 1)) for s in range(padded)
            )
            self.store.write_blob(self.regions[f"A{j}"].start, blob)
            self.store.write_range(self.regions[f"R{j}"].start,
                                   np.zeros(self.regions[f"R{j}"].words, dtype=np.uint64))
            self._write_table(j, np.zeros(p.n + 1, dtype="<u4"))
        self._write_a1([(0, [0] * (p.beta - 1))] * p.scan_slots)

    # -- the access protocol ----------------------------------------------------
    def access(self, k: int):
        """Retrieve block k; returns (value words, OpMetrics)."""
        p = self.params
        if not 1 <= k <= p.n:
            raise IndexOutOfRange(f"{k} outside [1, {p.n}]")
        op = self.store.begin_op("access")
        for i in range(2, p.c + 1):
            self.cnt[i] += 1

        a1 = self._read_a1()
        tables = {i: self._read_table(i) for i in range(2, p.c)}

        found_value = None
        for key, value in a1:
            if key == k:
                found_value = value
                break
        fnd = found_value is not None

        reads = {}
        for i in range(2, p.c):
            if fnd or tables[i][k] == 0:
                x = p.real_slots(i) + self.cnt[i] - 1
            else:
                x = int(tables[i][k]) - 1
                fnd = True
            reads[i] = self._slot_of(i, x)
        if fnd:
            x = p.real_slots(p.c) + self.cnt[p.c] - 1
        else:
            x = k - 1
        reads[p.c] = self._slot_of(p.c, x)

        for i, slot in reads.items():
            if slot in self._fresh[i]:
                raise WorkbenchError(f"position re-read within an epoch at level {i}")
            self._fresh[i].add(slot)
            _, key, value = self._read_record(f"A{i}", slot)
            if found_value is None and key == k:
                found_value = value
        if found_value is None:
            raise WorkbenchError("block not found; placement invariant broken")

        # write-back: block enters the scan array and every pending set
        a1[self.cnt[2] - 1] = (k, found_value)
        self._write_a1(a1)
        for i in range(2, p.c):
            tables[i][k] = self.cnt[i + 1]
            self._write_table(i, tables[i])
            self._write_record(f"R{i}", self.r_count[i],
                               self._enc_record(0, k, found_value))
            self.r_count[i] += 1

        rebuild_level = 0
        for i in range(p.c, 1, -1):
            if self.cnt[i] > p.trigger(i):
                rebuild_level = i
                break
        if rebuild_level:
            self._rebuild_into(rebuild_level)
            self._empty_below(rebuild_level)
            self.rebuild_log.append((op, rebuild_level))

        metrics = self.store.end_op(op)
        self.io_blocks += (metrics.read_words + metrics.write_words) / p.beta
        return found_value, metrics
