"""Dynamic page-efficient encrypted multimap over a traced page store.

Layout (all regions page-aligned):

* ``bins``        -- fixed-size encrypted bins managed by the tiered
                     two-choice allocator; each bin ciphertext occupies
                     ``capacity_ids + p`` words (capacity plus one page of
                     slack for the count word, per-ball metadata and AEAD
                     overhead), i.e. exactly ``capacity_ids/p + 1`` pages.
* ``len_table``   -- one word per entry: 48-bit address tag plus the
                     masked page count of the keyword's list. Lookups read
                     whole pages; collisions spill to the next page.
* ``full_tags`` / ``full_slots`` -- hash-addressed slots holding completed
                     sublists of exactly ``p`` identifiers. Slots are
                     written once, encrypted with a length-preserving
                     tweaked cipher, and occupy exactly one page each.

A keyword's list of length l is split into ``x = ceil(l/p)`` sublists:
x-1 completed pages in the slot table and one remainder held as a ball
whose bin pair is derived from (keyword, x). Growing the remainder past a
page completes slot x, bumps the stored page count, and starts a fresh
remainder ball under (keyword, x+1); the old ball stays behind as a
residual. Updates always fetch and rewrite both the current and the next
bin pair so the branch taken shows only through the declared page-count
change. An update that would overflow any touched bin is reverted: the
client re-encrypts the original bins and reports rejection.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import crypto
from .allocator import choose_bin, tier_of
from .crypto import EncKey, KeyChain, PrfKey
from .errors import CapacityExceeded, PendingLost, UnknownKeyword, WorkbenchError
from .params import AllocParams, WORD_BYTES, next_multiple
from .tracing import PageStore, Region, RegionPlan

TOKEN_LEN = 32
_COUNT_BITS = 20
_COUNT_MASK = (1 << _COUNT_BITS) - 1
_RES_BIT = 1 << _COUNT_BITS
_TIER_SHIFT = _COUNT_BITS + 1
_TAG_SHIFT = _COUNT_BITS + 4
_META_TAG_MASK = (1 << 40) - 1

MSG_SEARCH = 1
MSG_UPDATE = 2
MSG_COMMIT = 3
MSG_FLUSH = 4

FULL_SLOT_HEADROOM = 1.05  # slot table sized ~5% above the worst case N/p


@dataclass(frozen=True)
class BinnedParams:
    """Geometry of one index instance."""

    n_total: int  # bound N on the number of stored identifiers
    page_size: int
    lam: int = 128
    delta_mode: str = "logloglog"
    load_const: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.load_const is None:
            from .params import DEFAULT_LOAD_CONST

            object.__setattr__(self, "load_const", DEFAULT_LOAD_CONST)
        if self.n_total < 1 or self.page_size < 1:
            raise WorkbenchError("bad index geometry")

    @property
    def w_max(self) -> float:
        return max(1.0, self.n_total / self.page_size)

    @property
    def alloc(self) -> AllocParams:
        return AllocParams(self.w_max, self.lam, self.delta_mode, self.load_const)

    @property
    def num_bins(self) -> int:
        return self.alloc.num_bins

    @property
    def capacity_ids(self) -> int:
        raw = self.page_size * self.alloc.capacity_units
        # A single bin never needs to hold more than every identifier.
        clamp = next_multiple(max(self.n_total, self.page_size) + self.page_size, self.page_size)
        return min(raw, clamp)

    @property
    def bin_words(self) -> int:
        return self.capacity_ids + self.page_size

    @property
    def bin_plain_len(self) -> int:
        return self.bin_words * WORD_BYTES - crypto.PAD_OVERHEAD

    @property
    def len_slots(self) -> int:
        return next_multiple(max(self.n_total, self.page_size), self.page_size)

    @property
    def len_pages(self) -> int:
        return self.len_slots // self.page_size

    @property
    def full_slots(self) -> int:
        return max(1, math.ceil(FULL_SLOT_HEADROOM * math.ceil(self.n_total / self.page_size)))

    def region_words(self) -> dict:
        return {
            "bins": self.num_bins * self.bin_words,
            "len_table": self.len_slots,
            "full_tags": next_multiple(self.full_slots, self.page_size),
            "full_slots": self.full_slots * self.page_size,
        }


@dataclass
class BinnedKeys:
    enc: EncKey
    prf: PrfKey  # client secret: length-table masks
    addr: PrfKey  # public addressing salt, part of the server image
    slots: crypto.SlotCipher

    @classmethod
    def from_chain(cls, chain: KeyChain) -> "BinnedKeys":
        return cls(
            enc=chain.enc_key("bins"),
            prf=chain.prf_key("masks"),
            addr=chain.prf_key("addressing"),
            slots=chain.slot_key("full-pages"),
        )


# --------------------------------------------------------------------------
# addressing helpers (server-computable except the mask)


def ball_tag(addr: PrfKey, token: bytes, x: int) -> bytes:
    return crypto.prf(addr, b"ball" + struct.pack("<I", x) + token)


def meta_tag_of(tag: bytes) -> int:
    return int.from_bytes(tag[16:21], "little") & _META_TAG_MASK


def len_addr(addr: PrfKey, token: bytes) -> tuple[int, int]:
    """(home page index hash, 48-bit slot tag) for the length table."""
    t = crypto.prf(addr, b"len" + token)
    tag48 = int.from_bytes(t[8:14], "little") or 1
    return int.from_bytes(t[:8], "little"), tag48


def len_mask(prf_key: PrfKey, token: bytes) -> int:
    return int.from_bytes(crypto.prf(prf_key, b"len-mask" + token)[:2], "little")


def full_tag(addr: PrfKey, token: bytes, j: int) -> bytes:
    return crypto.prf(addr, b"full" + struct.pack("<I", j) + token)


def pack_meta(tag40: int, tier: int, residual: bool, count: int) -> int:
    return (tag40 << _TAG_SHIFT) | (tier << _TIER_SHIFT) | (_RES_BIT if residual else 0) | count


def unpack_meta(word: int) -> tuple[int, int, bool, int]:
    return (
        word >> _TAG_SHIFT,
        (word >> _TIER_SHIFT) & 0x7,
        bool(word & _RES_BIT),
        word & _COUNT_MASK,
    )


@dataclass
class BallRec:
    tag40: int
    tier: int
    residual: bool
    ids: list


def parse_bin(plain: bytes) -> list[BallRec]:
    words = np.frombuffer(plain, dtype="<u8")
    n_balls = int(words[0])
    balls = []
    pos = 1
    for _ in range(n_balls):
        tag40, tier, residual, count = unpack_meta(int(words[pos]))
        ids = words[pos + 1 : pos + 1 + count].tolist()
        balls.append(BallRec(tag40, tier, residual, ids))
        pos += 1 + count
    return balls


def build_bin(balls: list[BallRec]) -> tuple[bytes, int, int]:
    """Serialize; returns (plaintext, total identifier count, total words)."""
    words = [len(balls)]
    total_ids = 0
    for ball in balls:
        words.append(pack_meta(ball.tag40, ball.tier, ball.residual, len(ball.ids)))
        words.extend(int(i) for i in ball.ids)
        total_ids += len(ball.ids)
    return np.array(words, dtype="<u8").tobytes(), total_ids, len(words)


# --------------------------------------------------------------------------
# server


@dataclass
class _LenLookup:
    found: bool
    slot_addr: int  # address of the matching slot, or -1
    insert_addr: int  # first empty slot seen, or -1
    masked: int  # stored masked entry when found


class BinnedServerCore:
    """Region-level operations; the caller owns op bracketing."""

    def __init__(self, params: BinnedParams, addr: PrfKey, store: PageStore, regions: dict):
        self.params = params
        self.addr = addr
        self.store = store
        self.regions = regions

    @classmethod
    def plan_regions(cls, params: BinnedParams, plan: RegionPlan, prefix: str = "") -> dict:
        return {
            name: plan.add(prefix + name, words)
            for name, words in params.region_words().items()
        }

    # -- length table ------------------------------------------------------
    def len_lookup(self, token: bytes) -> _LenLookup:
        p = self.params.page_size
        home, tag48 = len_addr(self.addr, token)
        base = self.regions["len_table"].start
        pages = self.params.len_pages
        insert_addr = -1
        for step in range(pages):
            page = (home + step) % pages
            words = self.store.read_range(base + page * p, p)
            empty_here = -1
            for off, word in enumerate(words.tolist()):
                if (word >> 16) == tag48:
                    return _LenLookup(True, base + page * p + off, insert_addr, word & 0xFFFF)
                if word >> 16 == 0 and empty_here < 0:
                    empty_here = base + page * p + off
            if empty_here >= 0:
                if insert_addr < 0:
                    insert_addr = empty_here
                return _LenLookup(False, -1, insert_addr, 0)
        raise CapacityExceeded("length table full")

    def len_write(self, slot_addr: int, token: bytes, masked: int) -> None:
        _, tag48 = len_addr(self.addr, token)
        self.store.write_range(slot_addr, [(tag48 << 16) | (masked & 0xFFFF)])

    # -- bins ---------------------------------------------------------------
    def bin_addr(self, index: int) -> int:
        return self.regions["bins"].start + index * self.params.bin_words

    def read_bin(self, index: int) -> bytes:
        return self.store.read_blob(self.bin_addr(index), self.params.bin_words * WORD_BYTES)

    def write_bin(self, index: int, blob: bytes) -> None:
        if len(blob) != self.params.bin_words * WORD_BYTES:
            raise WorkbenchError("bin blob has the wrong fixed size")
        self.store.write_blob(self.bin_addr(index), blob)

    def bin_pair(self, token: bytes, x: int) -> tuple[int, int]:
        return crypto.hash_choices(ball_tag(self.addr, token, x), self.params.num_bins)

    # -- completed-page slots ------------------------------------------------
    def _probe_full(self, token: bytes, j: int, for_insert: bool) -> int:
        """Physical slot index holding (token, j), or the insert position."""
        t = full_tag(self.addr, token, j)
        tag48 = int.from_bytes(t[8:14], "little") or 1
        base = self.regions["full_tags"].start
        slots = self.params.full_slots
        home = int.from_bytes(t[:8], "little") % slots
        run = 8  # tags are read in short contiguous runs
        offset = 0
        while offset < slots:
            start = (home + offset) % slots
            take = min(run, slots - start, slots - offset)
            words = self.store.read_range(base + start, take).tolist()
            for k, word in enumerate(words):
                if for_insert and word == 0:
                    return start + k
                if not for_insert and word == tag48:
                    return start + k
                if not for_insert and word == 0:
                    raise UnknownKeyword(f"missing completed page {j}")
            offset += take
        raise CapacityExceeded("completed-page table full")

    def read_full(self, token: bytes, j: int) -> bytes:
        slot = self._probe_full(token, j, for_insert=False)
        p = self.params.page_size
        return self.store.read_blob(self.regions["full_slots"].start + slot * p, p * WORD_BYTES)

    def write_full(self, token: bytes, j: int, blob: bytes) -> None:
        slot = self._probe_full(token, j, for_insert=True)
        t = full_tag(self.addr, token, j)
        tag48 = int.from_bytes(t[8:14], "little") or 1
        p = self.params.page_size
        self.store.write_range(self.regions["full_tags"].start + slot, [tag48])
        self.store.write_blob(self.regions["full_slots"].start + slot * p, blob)


@dataclass
class _PendingUpdate:
    op_id: int
    token: bytes
    x_eff: int
    absent: bool
    len_slot: int  # existing slot address or insert address
    bin_indices: tuple


class BinnedServer:
    """Protocol server; owns the store unless embedded in a larger scheme."""

    def __init__(self, params: BinnedParams, keys_public_addr: PrfKey,
                 store: PageStore = None, regions: dict = None):
        self.params = params
        if store is None:
            plan = RegionPlan(params.page_size)
            regions = BinnedServerCore.plan_regions(params, plan)
            store = plan.build_store()
        self.core = BinnedServerCore(params, keys_public_addr, store, regions)
        self.store = store
        self._pending: _PendingUpdate | None = None

    # -- setup (performed by the data owner before handing the store over) --
    def install(self, bins: list[bytes], len_entries: list, full_pages: list,
                len_filler_seed: int) -> None:
        """Write the initial image: encrypted bins, masked length entries,
        completed pages, and pseudorandom filler in empty length slots."""
        op = self.store.begin_op("setup")
        install_image(self.core, bins, len_entries, full_pages, len_filler_seed)
        self.store.end_op(op)

    # -- protocol ------------------------------------------------------------
    def handle(self, request: bytes) -> bytes:
        msg = request[0]
        has_pending = request[1]
        body = request[2:]
        if has_pending:
            (plen,) = struct.unpack_from("<I", body)
            self._apply_commit(body[4 : 4 + plen])
            body = body[4 + plen :]
        if msg == MSG_SEARCH:
            return self._do_search(body)
        if msg == MSG_UPDATE:
            return self._do_update_fetch(body)
        if msg == MSG_COMMIT:
            self._apply_commit(body)
            return struct.pack("<IB", self.store.metrics_log[-1].op_id, 1)
        if msg == MSG_FLUSH:
            return struct.pack("<IB", 0, 1)
        raise WorkbenchError(f"bad message type {msg}")

    def _do_search(self, body: bytes) -> bytes:
        token = body[:TOKEN_LEN]
        (mask,) = struct.unpack_from("<H", body, TOKEN_LEN)
        op = self.store.begin_op("search")
        look = self.core.len_lookup(token)
        if not look.found:
            self.store.end_op(op)
            return struct.pack("<IBI", op, 0, 0)
        x = (look.masked ^ mask) & 0xFFFF
        x = max(1, min(x, -(-self.params.n_total // self.params.page_size)))
        a1, a2 = self.core.bin_pair(token, x)
        parts = [self.core.read_bin(a1), self.core.read_bin(a2)]
        for j in range(1, x):
            parts.append(self.core.read_full(token, j))
        self.store.end_op(op)
        return struct.pack("<IBI", op, 1, x) + b"".join(parts)

    def _do_update_fetch(self, body: bytes) -> bytes:
        if self._pending is not None:
            raise WorkbenchError("previous update not committed")
        token = body[:TOKEN_LEN]
        (mask,) = struct.unpack_from("<H", body, TOKEN_LEN)
        op = self.store.begin_op("update")
        look = self.core.len_lookup(token)
        if look.found:
            x = max(1, min((look.masked ^ mask) & 0xFFFF,
                           -(-self.params.n_total // self.params.page_size)))
            slot = look.slot_addr
        else:
            x = 1
            slot = look.insert_addr
        a1, a2 = self.core.bin_pair(token, x)
        a3, a4 = self.core.bin_pair(token, x + 1)
        indices = (a1, a2, a3, a4)
        blobs = {}
        for idx in indices:
            if idx not in blobs:
                blobs[idx] = self.core.read_bin(idx)
        self._pending = _PendingUpdate(op, token, x, not look.found, slot, indices)
        return (
            struct.pack("<IIB", op, x, 0 if look.found else 1)
            + b"".join(blobs[idx] for idx in indices)
        )

    def _apply_commit(self, body: bytes) -> None:
        pending = self._pending
        if pending is None:
            raise WorkbenchError("commit without a pending update")
        self._pending = None
        applied, split, insert_len = body[0], body[1], body[2]
        (new_masked,) = struct.unpack_from("<H", body, 3)
        pos = 5
        bin_len = self.params.bin_words * WORD_BYTES
        seen = set()
        for idx in pending.bin_indices:
            blob = body[pos : pos + bin_len]
            pos += bin_len
            if idx not in seen:
                self.core.write_bin(idx, blob)
                seen.add(idx)
        if applied:
            if split:
                payload = body[pos : pos + self.params.page_size * WORD_BYTES]
                pos += len(payload)
                self.core.write_full(pending.token, pending.x_eff, payload)
                self.core.len_write(pending.len_slot, pending.token, new_masked)
            elif insert_len:
                self.core.len_write(pending.len_slot, pending.token, new_masked)
        self.store.end_op(pending.op_id)

    # -- persistence ----------------------------------------------------------
    MAGIC = b"LSE1"

    def serialize(self) -> bytes:
        p = self.params
        header = self.MAGIC + struct.pack(
            "<IQIIIHBd",
            1, p.n_total, p.page_size, p.num_bins, p.capacity_ids,
            p.lam, 0 if p.delta_mode == "one" else 1, p.load_const,
        ) + self.core.addr.to_bytes()
        regions = struct.pack("<I", len(self.core.regions))
        for name, region in sorted(self.core.regions.items()):
            raw = name.encode()
            regions += struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", region.start, region.words)
        body = self.store.backing.astype("<u8").tobytes()
        return header + regions + struct.pack("<QI", len(body), self.store.page_size) + body

    @classmethod
    def deserialize(cls, blob: bytes) -> "BinnedServer":
        if blob[:4] != cls.MAGIC:
            raise WorkbenchError("bad container magic")
        off = 4
        _, n_total, page_size, _, _, lam, dmode, load_const = struct.unpack_from("<IQIIIHBd", blob, off)
        off += struct.calcsize("<IQIIIHBd")
        addr = PrfKey.from_bytes(blob[off : off + 36])
        off += 36
        (nregions,) = struct.unpack_from("<I", blob, off)
        off += 4
        regions = {}
        for _ in range(nregions):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode()
            off += nlen
            start, words = struct.unpack_from("<QQ", blob, off)
            off += 16
            regions[name] = Region(name, start, words)
        body_len, store_page = struct.unpack_from("<QI", blob, off)
        off += 12
        params = BinnedParams(n_total, page_size, lam, "one" if dmode == 0 else "logloglog", load_const)
        words = np.frombuffer(blob[off : off + body_len], dtype="<u8")
        store = PageStore(store_page, (len(words) + store_page - 1) // store_page)
        store.backing[: len(words)] = words
        server = cls(params, addr, store, regions)
        return server


# --------------------------------------------------------------------------
# client


class BinnedClientCore:
    """Stateless helpers shared by the standalone client and the composed
    local scheme: bin codecs and the update decision logic."""

    def __init__(self, params: BinnedParams, keys: BinnedKeys):
        self.params = params
        self.keys = keys

    def decrypt_bin(self, blob: bytes) -> list[BallRec]:
        return parse_bin(crypto.decrypt_padded(self.keys.enc, blob))

    def encrypt_bin(self, balls: list[BallRec]) -> bytes:
        plain, total_ids, total_words = build_bin(balls)
        if total_ids > self.params.capacity_ids or total_words * WORD_BYTES > self.params.bin_plain_len:
            raise CapacityExceeded("bin over capacity")
        return crypto.encrypt_padded(self.keys.enc, plain, self.params.bin_plain_len).blob

    def bin_fits(self, balls: list[BallRec]) -> bool:
        total_ids = sum(len(b.ids) for b in balls)
        total_words = 1 + len(balls) + total_ids
        return total_ids <= self.params.capacity_ids and total_words * WORD_BYTES <= self.params.bin_plain_len

    def find_ball(self, balls: list[BallRec], tag40: int):
        for ball in balls:
            if ball.tag40 == tag40 and not ball.residual:
                return ball
        return None

    def weight_of(self, count: int) -> float:
        return min(1.0, count / self.params.page_size)

    def place_ball(self, bins_by_index: dict, pair: tuple[int, int], rec: BallRec) -> int:
        """Two-choice placement by per-tier ball counts; ties to the first."""
        a, b = pair
        ca = sum(1 for x in bins_by_index[a] if x.tier == rec.tier)
        cb = sum(1 for x in bins_by_index[b] if x.tier == rec.tier)
        target = a if choose_bin(rec.tier, ca, cb) == 0 else b
        bins_by_index[target].append(rec)
        return target

    def apply_update(self, bins_by_index: dict, pair_cur, pair_next, token: bytes,
                     x: int, new_ids: list) -> tuple[bool, list]:
        """Mutates decrypted bins; returns (split, completed_page_ids).

        ``new_ids`` is the deduplicated merge of the current remainder and
        the added identifiers. Raises nothing; capacity is checked later.
        """
        addr = self.keys.addr
        m = self.params.num_bins
        p = self.params.page_size
        tag_cur = meta_tag_of(ball_tag(addr, token, x))
        cur = None
        for idx in set(pair_cur):
            cur = self.find_ball(bins_by_index[idx], tag_cur)
            if cur is not None:
                break
        if len(new_ids) <= p:
            if not new_ids:
                return False, []
            new_tier = tier_of(self.weight_of(len(new_ids)), m) if m >= 4 else 0
            if cur is None:
                self.place_ball(bins_by_index, pair_cur, BallRec(tag_cur, new_tier, False, list(new_ids)))
            elif new_tier == cur.tier:
                cur.ids = list(new_ids)
            else:
                # residual copy keeps the old footprint under a dummy payload
                cur.residual = True
                cur.ids = [0] * len(cur.ids)
                self.place_ball(bins_by_index, pair_cur, BallRec(tag_cur, new_tier, False, list(new_ids)))
            return False, []
        completed, rest = new_ids[:p], new_ids[p:]
        if cur is not None:
            cur.residual = True
            cur.ids = [0] * len(cur.ids)
        tag_next = meta_tag_of(ball_tag(addr, token, x + 1))
        rest_tier = tier_of(self.weight_of(len(rest)), m) if m >= 4 else 0
        self.place_ball(bins_by_index, pair_next, BallRec(tag_next, rest_tier, False, rest))
        return True, completed

    def encrypt_full_page(self, token: bytes, j: int, ids: list) -> bytes:
        if len(ids) != self.params.page_size:
            raise WorkbenchError("completed pages hold exactly one page of identifiers")
        tweak = full_tag(self.keys.addr, token, j)[16:32]
        plain = np.array(ids, dtype="<u8").tobytes()
        return self.keys.slots.encrypt(int.from_bytes(tweak, "little") & ((1 << 128) - 1), plain)

    def decrypt_full_page(self, token: bytes, j: int, blob: bytes) -> list:
        tweak = full_tag(self.keys.addr, token, j)[16:32]
        plain = self.keys.slots.decrypt(int.from_bytes(tweak, "little") & ((1 << 128) - 1), blob)
        return np.frombuffer(plain, dtype="<u8").tolist()


class BinnedClient:
    """Single-instance client; see ``TwinIndex`` for delete support."""

    def __init__(self, params: BinnedParams, keys: BinnedKeys, transport, rtt_mode: str = "two_rtt"):
        self.core = BinnedClientCore(params, keys)
        self.params = params
        self.keys = keys
        self.transport = transport
        self.rtt_mode = rtt_mode
        self._pending_commit: bytes | None = None

    # -- rtt plumbing ---------------------------------------------------------
    def set_rtt_mode(self, mode: str) -> None:
        if mode not in ("two_rtt", "piggyback"):
            raise WorkbenchError(f"unknown rtt mode {mode}")
        if mode == "two_rtt":
            self.flush_pending()
        self.rtt_mode = mode

    def _request(self, msg: int, body: bytes, hint: str) -> bytes:
        if self._pending_commit is not None:
            pending = self._pending_commit
            self._pending_commit = None
            frame = bytes([msg, 1]) + struct.pack("<I", len(pending)) + pending + body
        else:
            frame = bytes([msg, 0]) + body
        return self.transport.rpc(frame, hint)

    def flush_pending(self) -> None:
        if self._pending_commit is None:
            return
        self._request(MSG_FLUSH, b"", "flush")

    def close(self) -> None:
        if self._pending_commit is not None:
            raise PendingLost("client closed with a stashed update flow")

    @property
    def has_pending(self) -> bool:
        return self._pending_commit is not None

    # -- operations -------------------------------------------------------------
    def search(self, token: bytes) -> list:
        mask = len_mask(self.keys.prf, token)
        resp = self._request(MSG_SEARCH, token + struct.pack("<H", mask), "search")
        _, found, x = struct.unpack_from("<IBI", resp)
        if not found:
            return []
        pos = struct.calcsize("<IBI")
        bin_len = self.params.bin_words * WORD_BYTES
        page_len = self.params.page_size * WORD_BYTES
        bins = [
            self.core.decrypt_bin(resp[pos : pos + bin_len]),
            self.core.decrypt_bin(resp[pos + bin_len : pos + 2 * bin_len]),
        ]
        pos += 2 * bin_len
        ids: list = []
        for j in range(1, x):
            ids.extend(self.core.decrypt_full_page(token, j, resp[pos : pos + page_len]))
            pos += page_len
        tag = meta_tag_of(ball_tag(self.keys.addr, token, x))
        for balls in bins:
            ball = self.core.find_ball(balls, tag)
            if ball is not None:
                ids.extend(int(i) for i in ball.ids)
                break
        seen = set()
        out = []
        for i in ids:
            if i not in seen:
                seen.add(i)
                out.append(i)
        return out

    def update_add(self, token: bytes, new_ids) -> str:
        """Add identifiers (at most one page per call); returns the outcome."""
        if len(new_ids) > self.params.page_size:
            raise WorkbenchError("add at most one page per update")
        mask = len_mask(self.keys.prf, token)
        resp = self._request(MSG_UPDATE, token + struct.pack("<H", mask), "update")
        _, x, absent = struct.unpack_from("<IIB", resp)
        pos = struct.calcsize("<IIB")
        bin_len = self.params.bin_words * WORD_BYTES
        a1, a2 = crypto.hash_choices(ball_tag(self.keys.addr, token, x), self.params.num_bins)
        a3, a4 = crypto.hash_choices(ball_tag(self.keys.addr, token, x + 1), self.params.num_bins)
        indices = (a1, a2, a3, a4)
        bins_by_index = {}
        originals = {}
        for idx in indices:
            blob = resp[pos : pos + bin_len]
            pos += bin_len
            if idx not in bins_by_index:
                bins_by_index[idx] = self.core.decrypt_bin(blob)
                originals[idx] = blob
        tag = meta_tag_of(ball_tag(self.keys.addr, token, x))
        current: list = []
        for idx in set((a1, a2)):
            ball = self.core.find_ball(bins_by_index[idx], tag)
            if ball is not None:
                current = [int(i) for i in ball.ids]
                break
        merged = list(current)
        seen = set(current)
        for i in new_ids:
            if i not in seen:
                seen.add(i)
                merged.append(int(i))
        split, completed = self.core.apply_update(
            bins_by_index, (a1, a2), (a3, a4), token, x, merged
        )
        applied = all(self.core.bin_fits(balls) for balls in bins_by_index.values())
        if applied:
            blobs = {idx: self.core.encrypt_bin(balls) for idx, balls in bins_by_index.items()}
        else:
            # revert: the original contents go back out under fresh randomness
            blobs = {
                idx: self.core.encrypt_bin(self.core.decrypt_bin(orig))
                for idx, orig in originals.items()
            }
        new_x = x + 1 if split else x
        insert_len = 1 if (absent and applied and not split) else 0
        commit = bytes([1 if applied else 0, 1 if (split and applied) else 0, insert_len])
        commit += struct.pack("<H", (new_x if split else 1) ^ mask if applied else 0)
        commit += b"".join(blobs[idx] for idx in indices)
        if split and applied:
            commit += self.core.encrypt_full_page(token, x, completed)
        if self.rtt_mode == "piggyback":
            self._pending_commit = commit
        else:
            self._request(MSG_COMMIT, commit, "update-commit")
        return "applied" if applied else "rejected"


# --------------------------------------------------------------------------
# setup and the delete twin


def prepare_image(core: BinnedClientCore, db: dict, register_empty: bool = False):
    """Encrypt the initial image for a database.

    Returns (bin blobs, masked length entries, completed pages). With
    ``register_empty``, keywords with empty lists still get a length entry
    (page count 1) but no ball; composed schemes use this to keep access
    patterns uniform for keywords whose stored set happens to be empty.
    """
    params, keys = core.params, core.keys
    p = params.page_size
    bins_content: list[list[BallRec]] = [[] for _ in range(params.num_bins)]
    len_entries = []
    full_pages = []
    for token, ids in db.items():
        ids = [int(i) for i in ids]
        if not ids and not register_empty:
            continue
        x = max(1, -(-len(ids) // p))
        for j in range(1, x):
            full_pages.append((token, j, core.encrypt_full_page(token, j, ids[(j - 1) * p : j * p])))
        len_entries.append((token, x ^ len_mask(keys.prf, token)))
        remainder = ids[(x - 1) * p :]
        if not remainder:
            continue
        tag_full = ball_tag(keys.addr, token, x)
        a, b = crypto.hash_choices(tag_full, params.num_bins)
        rec = BallRec(
            meta_tag_of(tag_full),
            tier_of(core.weight_of(len(remainder)), params.num_bins) if params.num_bins >= 4 else 0,
            False,
            remainder,
        )
        ca = sum(1 for r in bins_content[a] if r.tier == rec.tier)
        cb = sum(1 for r in bins_content[b] if r.tier == rec.tier)
        bins_content[a if choose_bin(rec.tier, ca, cb) == 0 else b].append(rec)
    return [core.encrypt_bin(balls) for balls in bins_content], len_entries, full_pages


def install_image(server_core: BinnedServerCore, bins, len_entries, full_pages,
                  filler_seed: int) -> None:
    """Write an initial image into the server regions; op must be open."""
    store = server_core.store
    params = server_core.params
    rng = np.random.default_rng(filler_seed)
    filler = rng.integers(0, 1 << 16, size=params.len_slots, dtype=np.uint64)
    store.write_range(server_core.regions["len_table"].start, filler)
    for i, blob in enumerate(bins):
        server_core.write_bin(i, blob)
    for token, masked in len_entries:
        look = server_core.len_lookup(token)
        server_core.len_write(look.insert_addr, token, masked)
    for token, j, blob in full_pages:
        server_core.write_full(token, j, blob)


def build_index(chain: KeyChain, params: BinnedParams, db: dict,
                transport_factory=None, rtt_mode: str = "two_rtt"):
    """Construct (server, client) with the database installed.

    ``db`` maps 32-byte keyword tokens to identifier lists; the total count
    must stay within ``params.n_total``.
    """
    total = sum(len(v) for v in db.values())
    if total > params.n_total:
        raise CapacityExceeded(f"{total} identifiers exceed the bound {params.n_total}")
    regime = params.n_total ** (1 - 1 / max(1.0, math.log2(math.log2(max(params.lam, 4)))))
    if params.page_size > regime:
        warnings.warn(
            f"page size {params.page_size} above the analysis regime ({regime:.0f}); "
            "overflow bounds degrade",
            stacklevel=2,
        )
    keys = BinnedKeys.from_chain(chain)
    core = BinnedClientCore(params, keys)
    bin_blobs, len_entries, full_pages = prepare_image(core, db)
    server = BinnedServer(params, keys.addr)
    server.install(bin_blobs, len_entries, full_pages, chain.seed64("len-filler"))
    if transport_factory is None:
        from .transport import LoopbackTransport

        transport = LoopbackTransport(server.handle)
    else:
        transport = transport_factory(server)
    client = BinnedClient(params, keys, transport, rtt_mode)
    return server, client


class TwinIndex:
    """Delete support via paired instances: one for additions, one for
    deletions; combined searches return the set difference."""

    def __init__(self, chain: KeyChain, params: BinnedParams, db: dict, rtt_mode: str = "two_rtt"):
        self.add_server, self.add_client = build_index(chain.child("add"), params, db, rtt_mode=rtt_mode)
        self.del_server, self.del_client = build_index(chain.child("del"), params, {}, rtt_mode=rtt_mode)

    def add(self, token: bytes, ids) -> str:
        return self.add_client.update_add(token, ids)

    def delete(self, token: bytes, ids) -> str:
        return self.del_client.update_add(token, ids)

    def search(self, token: bytes) -> list:
        added = self.add_client.search(token)
        removed = set(self.del_client.search(token))
        return [i for i in added if i not in removed]
