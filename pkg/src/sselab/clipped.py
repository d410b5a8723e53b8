"""Clipped one-choice bucket store.

Lists are spread over a power-of-two array of fixed-capacity buckets. A
list of length l occupies the aligned run of ``2^ceil(log2 l)`` consecutive
buckets (its superbucket) around the keyword's hash position, one new
bucket per element, chosen by closed-form arithmetic on the hash and the
current length. Fetching a list therefore reads one contiguous bucket
interval. Buckets hold at most ``tau`` items; items that land in a full
bucket are refused ("clipped") and handed back to the caller, which is the
point: a larger scheme stores them elsewhere.

The store runs in two modes: standalone, with its own encrypted per-keyword
length table, or embedded, where the caller tracks lengths and passes them
in.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import crypto
from .crypto import EncKey, KeyChain, PrfKey
from .errors import CapacityExceeded, UnknownKeyword, WorkbenchError
from .params import WORD_BYTES, is_pow2, next_multiple
from .tracing import PageStore, RegionPlan

TOKEN_LEN = 32


def fetch_buckets(num_buckets: int, h: int, length: int) -> range:
    """Bucket indices to read for a list of ``length`` items hashed to h."""
    if not is_pow2(num_buckets):
        raise WorkbenchError("bucket count must be a power of two")
    if length < 1:
        raise WorkbenchError("fetch needs a positive length")
    span = 1 << max(0, math.ceil(math.log2(length)))
    if span >= num_buckets:
        return range(0, num_buckets)
    start = (h // span) * span
    return range(start, start + span)


def add_bucket(num_buckets: int, h: int, length: int) -> int:
    """Bucket receiving the next item of a list currently ``length`` long.

    Fills the superbucket around h leftward-by-halves so that the first
    ``2^k`` placements are exactly the aligned ``2^k``-run containing h.
    """
    if not is_pow2(num_buckets):
        raise WorkbenchError("bucket count must be a power of two")
    length = length % num_buckets
    span = 1 << max(0, math.ceil(math.log2(length + 1)))
    i = h // span
    if (2 * h // span) % 2 == 0:
        return span * i + length
    return span * i + length - span // 2


@dataclass(frozen=True)
class ClippedParams:
    n_total: int
    alpha: int = 4
    d: int = 1

    @property
    def num_buckets(self) -> int:
        loglog = math.log2(math.log2(max(self.n_total, 4)))
        return 1 << max(0, math.ceil(math.log2(max(self.n_total, 2) / max(loglog, 1e-9))))

    @property
    def tau(self) -> int:
        return math.ceil(self.alpha * math.log2(math.log2(max(self.n_total, 4))))

    @property
    def longest_list_bound(self) -> float:
        return self.n_total / (math.log2(max(self.n_total, 2)) ** self.d)

    @property
    def bucket_plain_words(self) -> int:
        # count word + tau entries of (keyword tag, identifier)
        return 1 + 2 * self.tau

    @property
    def bucket_words(self) -> int:
        return self.bucket_plain_words + crypto.PAD_OVERHEAD // WORD_BYTES

    def region_words(self) -> dict:
        return {"buckets": self.num_buckets * self.bucket_words}


def keyword_hash(addr: PrfKey, token: bytes, num_buckets: int) -> int:
    return int.from_bytes(crypto.prf(addr, b"bucket" + token)[:8], "little") % num_buckets


def entry_tag(addr: PrfKey, token: bytes) -> int:
    return int.from_bytes(crypto.prf(addr, b"entry" + token)[:8], "little") or 1


# --------------------------------------------------------------------------
# pure allocation pass, shared by setup, the embedded mode, and experiments


def allocate(db_lengths, num_buckets: int, tau: int, hash_of) -> tuple[np.ndarray, dict]:
    """Count-only simulation: returns (bucket fill counts, clipped counts).

    ``db_lengths`` yields (key, length); ``hash_of`` maps a key to its
    bucket hash. Items are inserted in list order.
    """
    fills = np.zeros(num_buckets, dtype=np.int64)
    clipped: dict = {}
    for key, length in db_lengths:
        h = hash_of(key)
        for t in range(length):
            idx = add_bucket(num_buckets, h, t)
            if fills[idx] < tau:
                fills[idx] += 1
            else:
                clipped[key] = clipped.get(key, 0) + 1
    return fills, clipped


# --------------------------------------------------------------------------
# bucket codec


def parse_bucket(plain: bytes) -> list[tuple[int, int]]:
    words = np.frombuffer(plain, dtype="<u8")
    count = int(words[0])
    flat = words[1 : 1 + 2 * count].tolist()
    return [(flat[2 * i], flat[2 * i + 1]) for i in range(count)]


def build_bucket(entries: list[tuple[int, int]], tau: int) -> bytes:
    if len(entries) > tau:
        raise CapacityExceeded("bucket over its clipping threshold")
    words = [len(entries)]
    for tag, ident in entries:
        words.extend((int(tag), int(ident)))
    return np.array(words, dtype="<u8").tobytes()


class ClippedRegion:
    """Bucket array bound to a store region; shared by both modes."""

    def __init__(self, params: ClippedParams, addr: PrfKey, enc: EncKey,
                 store: PageStore, regions: dict, hash_override=None):
        self.params = params
        self.addr = addr
        self.enc = enc
        self.store = store
        self.regions = regions
        # test hook: force all keywords into one superbucket
        self._hash_override = hash_override

    def hash_of(self, token: bytes) -> int:
        if self._hash_override is not None:
            return self._hash_override(token)
        return keyword_hash(self.addr, token, self.params.num_buckets)

    def bucket_addr(self, index: int) -> int:
        return self.regions["buckets"].start + index * self.params.bucket_words

    def read_bucket(self, index: int) -> bytes:
        return self.store.read_blob(self.bucket_addr(index), self.params.bucket_words * WORD_BYTES)

    def write_bucket(self, index: int, blob: bytes) -> None:
        self.store.write_blob(self.bucket_addr(index), blob)

    def read_fetch_range(self, token: bytes, length: int) -> list[bytes]:
        """One contiguous read covering the whole superbucket."""
        rng = fetch_buckets(self.params.num_buckets, self.hash_of(token), max(1, length))
        bw = self.params.bucket_words
        start = self.bucket_addr(rng.start)
        raw = self.store.read_range(start, len(rng) * bw).astype("<u8").tobytes()
        return [raw[i * bw * WORD_BYTES : (i + 1) * bw * WORD_BYTES] for i in range(len(rng))]

    def decrypt_bucket(self, blob: bytes) -> list[tuple[int, int]]:
        return parse_bucket(crypto.decrypt_padded(self.enc, blob))

    def encrypt_bucket(self, entries: list[tuple[int, int]]) -> bytes:
        plain = build_bucket(entries, self.params.tau)
        return crypto.encrypt_padded(
            self.enc, plain, self.params.bucket_plain_words * WORD_BYTES
        ).blob

    def install(self, db: dict) -> dict:
        """Insert every list element in order; returns {token: clipped ids}.

        Must run inside an open op. Buckets are padded and encrypted after
        the allocation pass.
        """
        contents: list[list[tuple[int, int]]] = [[] for _ in range(self.params.num_buckets)]
        clip: dict = {}
        tau = self.params.tau
        for token, ids in db.items():
            if len(ids) > self.params.longest_list_bound:
                import warnings

                warnings.warn("list longer than the overflow analysis allows", stacklevel=2)
            h = self.hash_of(token)
            tag = entry_tag(self.addr, token)
            for t, ident in enumerate(ids):
                idx = add_bucket(self.params.num_buckets, h, t)
                if len(contents[idx]) < tau:
                    contents[idx].append((tag, int(ident)))
                else:
                    clip.setdefault(token, []).append(int(ident))
        for i, entries in enumerate(contents):
            self.write_bucket(i, self.encrypt_bucket(entries))
        return clip


# --------------------------------------------------------------------------
# standalone scheme with its own length table


@dataclass
class ClippedKeys:
    enc: EncKey  # bucket encryption
    prf: PrfKey  # per-keyword table keys
    addr: PrfKey  # public addressing salt

    @classmethod
    def from_chain(cls, chain: KeyChain) -> "ClippedKeys":
        return cls(chain.enc_key("buckets"), chain.prf_key("keyword"), chain.prf_key("addressing"))

    def keyword_key(self, token: bytes) -> EncKey:
        return EncKey(crypto.prf(self.prf, b"kw" + token))


LEN_CT_LEN = 4 + crypto.PAD_OVERHEAD  # encrypt_padded(4-byte length)
LEN_SLOT_WORDS = (LEN_CT_LEN + WORD_BYTES - 1) // WORD_BYTES


class LengthTable:
    """Tag-addressed table of per-keyword encrypted lengths.

    The ciphertext opens only under the per-keyword key handed over at
    query time, so the server learns lengths exactly when queried.
    """

    def __init__(self, addr: PrfKey, store: PageStore, tag_region, ct_region, slots: int):
        self.addr = addr
        self.store = store
        self.tags = tag_region
        self.cts = ct_region
        self.slots = slots

    @staticmethod
    def region_words(slots: int, page_size: int) -> dict:
        return {
            "table_tags": next_multiple(slots, page_size),
            "table_cts": slots * LEN_SLOT_WORDS,
        }

    def _tag(self, token: bytes) -> tuple[int, int]:
        t = crypto.prf(self.addr, b"table" + token)
        return int.from_bytes(t[:8], "little") % self.slots, int.from_bytes(t[8:14], "little") or 1

    def _probe(self, token: bytes, for_insert: bool) -> int:
        home, tag48 = self._tag(token)
        run = 8
        offset = 0
        while offset < self.slots:
            start = (home + offset) % self.slots
            take = min(run, self.slots - start, self.slots - offset)
            words = self.store.read_range(self.tags.start + start, take).tolist()
            for k, word in enumerate(words):
                if word == tag48:
                    return start + k
                if word == 0:
                    if for_insert:
                        return start + k
                    return -1
            offset += take
        raise CapacityExceeded("length table full")

    def read(self, token: bytes) -> bytes | None:
        slot = self._probe(token, for_insert=False)
        if slot < 0:
            return None
        return self.store.read_blob(self.cts.start + slot * LEN_SLOT_WORDS, LEN_CT_LEN)

    def write(self, token: bytes, ct: bytes) -> None:
        slot = self._probe(token, for_insert=True)
        _, tag48 = self._tag(token)
        self.store.write_range(self.tags.start + slot, [tag48])
        self.store.write_blob(self.cts.start + slot * LEN_SLOT_WORDS, ct)


MSG_SEARCH = 1
MSG_UPDATE = 2
MSG_COMMIT = 3


class ClippedServer:
    def __init__(self, params: ClippedParams, addr: PrfKey, page_size: int = 16,
                 hash_override=None):
        self.params = params
        plan = RegionPlan(page_size)
        regions = {name: plan.add(name, words) for name, words in params.region_words().items()}
        for name, words in LengthTable.region_words(params.n_total, page_size).items():
            regions[name] = plan.add(name, words)
        self.store = plan.build_store()
        self.region_map = regions
        self.buckets = ClippedRegion(params, addr, None, self.store, regions, hash_override)
        self.table = LengthTable(addr, self.store, regions["table_tags"], regions["table_cts"],
                                 params.n_total)
        self._pending = None

    def install(self, db: dict, keys: ClippedKeys) -> dict:
        """Build-time population by the data owner; returns the clip map."""
        op = self.store.begin_op("setup")
        self.buckets.enc = keys.enc
        clip = self.buckets.install(db)
        for token, ids in db.items():
            ct = crypto.encrypt_padded(keys.keyword_key(token), struct.pack("<I", len(ids)), 4)
            self.table.write(token, ct.blob)
        self.store.end_op(op)
        return clip

    def handle(self, request: bytes) -> bytes:
        msg = request[0]
        body = request[1:]
        if msg == MSG_SEARCH:
            return self._do_search(body)
        if msg == MSG_UPDATE:
            return self._do_update(body)
        if msg == MSG_COMMIT:
            return self._do_commit(body)
        raise WorkbenchError(f"bad message type {msg}")

    def _read_length(self, token: bytes, kw_key: EncKey) -> int:
        ct = self.table.read(token)
        if ct is None:
            raise UnknownKeyword(token.hex()[:16])
        return struct.unpack("<I", crypto.decrypt_padded(kw_key, ct))[0]

    def _do_search(self, body: bytes) -> bytes:
        token = body[:TOKEN_LEN]
        kw_key = EncKey(body[TOKEN_LEN : TOKEN_LEN + 32])
        op = self.store.begin_op("search")
        length = self._read_length(token, kw_key)
        blobs = self.buckets.read_fetch_range(token, length) if length else []
        self.store.end_op(op)
        return struct.pack("<II", op, length) + b"".join(blobs)

    def _do_update(self, body: bytes) -> bytes:
        token = body[:TOKEN_LEN]
        kw_key = EncKey(body[TOKEN_LEN : TOKEN_LEN + 32])
        op = self.store.begin_op("update")
        try:
            length = self._read_length(token, kw_key)
        except UnknownKeyword:
            length = 0
        idx = add_bucket(self.params.num_buckets, self.buckets.hash_of(token), length)
        blob = self.buckets.read_bucket(idx)
        # length advances whether or not the item fits; the new table entry
        # is written at commit so a dropped client leaves the table untouched
        self._pending = (op, token, idx, length, kw_key)
        return struct.pack("<II", op, length) + blob

    def _do_commit(self, body: bytes) -> bytes:
        if self._pending is None:
            raise WorkbenchError("commit without pending update")
        op, token, idx, length, kw_key = self._pending
        self._pending = None
        bucket_len = self.params.bucket_words * WORD_BYTES
        self.buckets.write_bucket(idx, body[:bucket_len])
        ct = crypto.encrypt_padded(kw_key, struct.pack("<I", length + 1), 4)
        self.table.write(token, ct.blob)
        self.store.end_op(op)
        return struct.pack("<IB", op, 1)


class ClippedClient:
    def __init__(self, params: ClippedParams, keys: ClippedKeys, transport):
        self.params = params
        self.keys = keys
        self.transport = transport

    def search(self, token: bytes) -> list:
        kw = self.keys.keyword_key(token)
        resp = self.transport.rpc(bytes([MSG_SEARCH]) + token + kw.data, "search")
        _, length = struct.unpack_from("<II", resp)
        if length == 0:
            return []
        pos = 8
        bucket_len = self.params.bucket_words * WORD_BYTES
        tag = entry_tag(self.keys.addr, token)
        out = []
        while pos < len(resp):
            entries = parse_bucket(crypto.decrypt_padded(self.keys.enc, resp[pos : pos + bucket_len]))
            out.extend(ident for t, ident in entries if t == tag)
            pos += bucket_len
        return out

    def update_add(self, token: bytes, ident: int) -> list:
        """Single-item add; returns the clipped ids ([] or [ident])."""
        kw = self.keys.keyword_key(token)
        resp = self.transport.rpc(bytes([MSG_UPDATE]) + token + kw.data, "update")
        _, _length = struct.unpack_from("<II", resp)
        blob = resp[8:]
        entries = parse_bucket(crypto.decrypt_padded(self.keys.enc, blob))
        clip: list = []
        if len(entries) < self.params.tau:
            entries.append((entry_tag(self.keys.addr, token), int(ident)))
        else:
            clip = [int(ident)]
        new_blob = crypto.encrypt_padded(
            self.keys.enc, build_bucket(entries, self.params.tau),
            self.params.bucket_plain_words * WORD_BYTES,
        ).blob
        self.transport.rpc(bytes([MSG_COMMIT]) + new_blob, "update-commit")
        return clip


def build_clipped(chain: KeyChain, params: ClippedParams, db: dict, page_size: int = 16,
                  hash_override=None):
    """Standalone construction; returns (server, client, clip)."""
    keys = ClippedKeys.from_chain(chain)
    server = ClippedServer(params, keys.addr, page_size, hash_override)
    clip = server.install(db, keys)
    from .transport import LoopbackTransport

    client = ClippedClient(params, keys, LoopbackTransport(server.handle))
    return server, client, clip
