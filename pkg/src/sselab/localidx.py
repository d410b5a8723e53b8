"""Constant-locality composition: clipped bucket store plus overflow layers.

The bulk of the database lives in the clipped one-choice store, whose
fetches are a single contiguous bucket interval. Items it refuses live in
an array of page-efficient index layers: layer ``i`` has page size ``2^i``
and holds the overflow of every keyword whose current length ``l``
satisfies ``ceil(log2 l) == i``, so a layer search for such a keyword costs
a constant number of its (one-page) structures. A per-keyword encrypted
length table steers both halves; its entries open under per-keyword keys
handed over at query time, so lengths are revealed to the server exactly
when a keyword is queried.

Updates add one identifier: the bucket store takes it or refuses it, the
current layer absorbs the refusal set (possibly empty; the layer update
runs either way so the access pattern depends only on the revealed
length), and when the length crosses a power of two the keyword's overflow
migrates wholesale to the next layer. Superseded layer entries are never
read again and are reported separately by the storage accounting.

Everything shares one traced store, so cross-structure access patterns are
measured coherently.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from . import binned, clipped, crypto
from .binned import (BallRec, BinnedClientCore, BinnedKeys, BinnedParams,
                     BinnedServerCore, TOKEN_LEN, ball_tag, len_mask, meta_tag_of)
from .clipped import ClippedParams, ClippedRegion, LengthTable
from .crypto import EncKey, KeyChain, PrfKey
from .errors import UnknownKeyword, WorkbenchError
from .params import WORD_BYTES
from .tracing import RegionPlan

MSG_SEARCH = 1
MSG_UPDATE = 2
MSG_COMMIT = 3


def level_of(length: int) -> int:
    """Layer index for a list length: ceil(log2 max(length, 1))."""
    if length <= 1:
        return 0
    return math.ceil(math.log2(length))


@dataclass(frozen=True)
class LocalParams:
    n_total: int
    alpha: int = 4
    d: int = 1
    lam: int = 128
    delta_mode: str = "logloglog"
    load_const: float = None  # type: ignore[assignment]
    page_size: int = 16  # ambient page size used for trace accounting

    def __post_init__(self):
        if self.load_const is None:
            from .params import DEFAULT_LOAD_CONST

            object.__setattr__(self, "load_const", DEFAULT_LOAD_CONST)

    @property
    def num_levels(self) -> int:
        return math.ceil(math.log2(max(self.n_total, 2)))

    @property
    def layer_bound(self) -> int:
        return max(1, math.ceil(self.n_total / math.log2(max(self.n_total, 2))))

    @property
    def clip(self) -> ClippedParams:
        return ClippedParams(self.n_total, self.alpha, self.d)

    def layer_params(self, i: int) -> BinnedParams:
        return BinnedParams(self.layer_bound, 1 << i, self.lam, self.delta_mode, self.load_const)


@dataclass
class LocalKeys:
    clip_enc: EncKey
    kw_prf: PrfKey  # per-keyword length-table keys
    addr: PrfKey  # public addressing salt shared by every component
    layers: list  # BinnedKeys per layer

    @classmethod
    def from_chain(cls, chain: KeyChain, num_levels: int) -> "LocalKeys":
        addr = chain.prf_key("addressing")
        layers = []
        for i in range(num_levels + 1):
            keys = BinnedKeys.from_chain(chain.child(f"layer{i}"))
            keys.addr = addr
            layers.append(keys)
        return cls(chain.enc_key("buckets"), chain.prf_key("keyword"), addr, layers)

    def keyword_key(self, token: bytes) -> EncKey:
        return EncKey(crypto.prf(self.kw_prf, b"kw" + token))


class LocalServer:
    def __init__(self, params: LocalParams, addr: PrfKey, hash_override=None):
        self.params = params
        plan = RegionPlan(params.page_size)
        clip_regions = {
            name: plan.add("clip_" + name, words)
            for name, words in params.clip.region_words().items()
        }
        table_regions = {
            name: plan.add(name, words)
            for name, words in LengthTable.region_words(params.n_total, params.page_size).items()
        }
        self.layer_cores: list[BinnedServerCore] = []
        layer_region_maps = []
        for i in range(params.num_levels + 1):
            lp = params.layer_params(i)
            layer_region_maps.append(BinnedServerCore.plan_regions(lp, plan, f"layer{i}_"))
        self.store = plan.build_store()
        for i in range(params.num_levels + 1):
            self.layer_cores.append(
                BinnedServerCore(params.layer_params(i), addr, self.store, layer_region_maps[i])
            )
        self.clip = ClippedRegion(params.clip, addr, None, self.store, clip_regions, hash_override)
        self.table = LengthTable(addr, self.store, table_regions["table_tags"],
                                 table_regions["table_cts"], params.n_total)
        self.superseded_words = 0  # words of layer balls left behind by migrations
        self._pending = None

    # -- storage accounting -------------------------------------------------
    def words_allocated(self) -> int:
        return self.store.words

    def live_words(self) -> int:
        return self.store.words - self.superseded_words

    # -- protocol --------------------------------------------------------------
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

    def _read_length(self, token: bytes, kw_key: EncKey):
        ct = self.table.read(token)
        if ct is None:
            return None
        return struct.unpack("<I", crypto.decrypt_padded(kw_key, ct))[0]

    def _layer_bins(self, core: BinnedServerCore, token: bytes, x: int):
        pair = core.bin_pair(token, x)
        out = []
        seen = {}
        for idx in pair:
            if idx not in seen:
                seen[idx] = core.read_bin(idx)
            out.append(seen[idx])
        return pair, out

    def _do_search(self, body: bytes) -> bytes:
        token = body[:TOKEN_LEN]
        kw_key = EncKey(body[TOKEN_LEN : TOKEN_LEN + 32])
        op = self.store.begin_op("search")
        length = self._read_length(token, kw_key)
        if length is None:
            self.store.end_op(op)
            return struct.pack("<IB", op, 0)
        level = level_of(length)
        blobs = self.clip.read_fetch_range(token, length) if length else []
        core = self.layer_cores[level]
        core.len_lookup(token)
        _, bins = self._layer_bins(core, token, 1)
        self.store.end_op(op)
        return (
            struct.pack("<IBIBH", op, 1, length, level, len(blobs))
            + b"".join(blobs)
            + b"".join(bins)
        )

    def _do_update(self, body: bytes) -> bytes:
        if self._pending is not None:
            raise WorkbenchError("previous update not committed")
        token = body[:TOKEN_LEN]
        kw_key = EncKey(body[TOKEN_LEN : TOKEN_LEN + 32])
        op = self.store.begin_op("update")
        length = self._read_length(token, kw_key)
        if length is None:
            length = 0
        cur, nxt = level_of(length), level_of(length + 1)
        migrate = nxt > cur
        bucket_idx = clipped.add_bucket(self.params.clip.num_buckets,
                                        self.clip.hash_of(token), length)
        bucket_blob = self.clip.read_bucket(bucket_idx)
        target = nxt
        search_bins = b""
        if migrate:
            core = self.layer_cores[cur]
            core.len_lookup(token)
            _, bins = self._layer_bins(core, token, 1)
            search_bins = b"".join(bins)
        tcore = self.layer_cores[target]
        look = tcore.len_lookup(token)
        len_slot = look.slot_addr if look.found else look.insert_addr
        pair1 = tcore.bin_pair(token, 1)
        pair2 = tcore.bin_pair(token, 2)
        indices = (*pair1, *pair2)
        blobs = {}
        for idx in indices:
            if idx not in blobs:
                blobs[idx] = tcore.read_bin(idx)
        self._pending = (op, token, kw_key, length, bucket_idx, target,
                         indices, len_slot, not look.found)
        header = struct.pack("<IIBBB", op, length, 1 if migrate else 0, cur, target)
        return header + bucket_blob + search_bins + b"".join(blobs[i] for i in indices)

    def _do_commit(self, body: bytes) -> bytes:
        if self._pending is None:
            raise WorkbenchError("commit without pending update")
        op, token, kw_key, length, bucket_idx, target, indices, len_slot, absent = self._pending
        self._pending = None
        applied = body[0]
        insert_len = body[1]
        (masked,) = struct.unpack_from("<H", body, 2)
        (superseded,) = struct.unpack_from("<I", body, 4)
        pos = 8
        bucket_len = self.params.clip.bucket_words * WORD_BYTES
        self.clip.write_bucket(bucket_idx, body[pos : pos + bucket_len])
        pos += bucket_len
        tcore = self.layer_cores[target]
        bin_len = tcore.params.bin_words * WORD_BYTES
        seen = set()
        for idx in indices:
            blob = body[pos : pos + bin_len]
            pos += bin_len
            if idx not in seen:
                tcore.write_bin(idx, blob)
                seen.add(idx)
        if applied:
            if insert_len:
                tcore.len_write(len_slot, token, masked)
            ct = crypto.encrypt_padded(kw_key, struct.pack("<I", length + 1), 4)
            self.table.write(token, ct.blob)
            self.superseded_words += superseded
        self.store.end_op(op)
        return struct.pack("<IB", op, 1)


class LocalClient:
    def __init__(self, params: LocalParams, keys: LocalKeys, transport):
        self.params = params
        self.keys = keys
        self.transport = transport
        self.layer_cores = [
            BinnedClientCore(params.layer_params(i), keys.layers[i])
            for i in range(params.num_levels + 1)
        ]

    def _layer_ball_ids(self, core: BinnedClientCore, token: bytes, blobs: list) -> list:
        tag = meta_tag_of(ball_tag(self.keys.addr, token, 1))
        for blob in blobs:
            ball = core.find_ball(core.decrypt_bin(blob), tag)
            if ball is not None:
                return [int(i) for i in ball.ids]
        return []

    def search(self, token: bytes) -> list:
        kw = self.keys.keyword_key(token)
        resp = self.transport.rpc(bytes([MSG_SEARCH]) + token + kw.data, "search")
        _, found = struct.unpack_from("<IB", resp)
        if not found:
            raise UnknownKeyword(token.hex()[:16])
        _, _, length, level, nbuckets = struct.unpack_from("<IBIBH", resp)
        pos = struct.calcsize("<IBIBH")
        bucket_len = self.params.clip.bucket_words * WORD_BYTES
        tag = clipped.entry_tag(self.keys.addr, token)
        ids = []
        for _ in range(nbuckets):
            entries = clipped.parse_bucket(
                crypto.decrypt_padded(self.keys.clip_enc, resp[pos : pos + bucket_len])
            )
            ids.extend(ident for t, ident in entries if t == tag)
            pos += bucket_len
        core = self.layer_cores[level]
        bin_len = core.params.bin_words * WORD_BYTES
        blobs = [resp[pos : pos + bin_len], resp[pos + bin_len : pos + 2 * bin_len]]
        ids.extend(self._layer_ball_ids(core, token, blobs))
        seen = set()
        out = []
        for i in ids:
            if i not in seen:
                seen.add(i)
                out.append(i)
        return out

    def update_add(self, token: bytes, ident: int) -> str:
        kw = self.keys.keyword_key(token)
        resp = self.transport.rpc(bytes([MSG_UPDATE]) + token + kw.data, "update")
        _, length, migrate, cur, target = struct.unpack_from("<IIBBB", resp)
        pos = struct.calcsize("<IIBBB")
        bucket_len = self.params.clip.bucket_words * WORD_BYTES
        bucket_blob = resp[pos : pos + bucket_len]
        pos += bucket_len
        entries = clipped.parse_bucket(crypto.decrypt_padded(self.keys.clip_enc, bucket_blob))
        refused: list = []
        if len(entries) < self.params.clip.tau:
            entries.append((clipped.entry_tag(self.keys.addr, token), int(ident)))
        else:
            refused = [int(ident)]
        new_bucket = crypto.encrypt_padded(
            self.keys.clip_enc,
            clipped.build_bucket(entries, self.params.clip.tau),
            self.params.clip.bucket_plain_words * WORD_BYTES,
        ).blob

        carried = list(refused)
        superseded = 0
        if migrate:
            score = self.layer_cores[cur]
            sh_len = score.params.bin_words * WORD_BYTES
            blobs = [resp[pos : pos + sh_len], resp[pos + sh_len : pos + 2 * sh_len]]
            pos += 2 * sh_len
            moved = self._layer_ball_ids(score, token, blobs)
            superseded = len(moved)
            carried = moved + carried

        tcore = self.layer_cores[target]
        bin_len = tcore.params.bin_words * WORD_BYTES
        pair1 = crypto.hash_choices(ball_tag(self.keys.addr, token, 1), tcore.params.num_bins)
        pair2 = crypto.hash_choices(ball_tag(self.keys.addr, token, 2), tcore.params.num_bins)
        indices = (*pair1, *pair2)
        bins_by_index = {}
        originals = {}
        for idx in indices:
            blob = resp[pos : pos + bin_len]
            pos += bin_len
            if idx not in bins_by_index:
                bins_by_index[idx] = tcore.decrypt_bin(blob)
                originals[idx] = blob
        tag = meta_tag_of(ball_tag(self.keys.addr, token, 1))
        current: list = []
        for idx in set(pair1):
            ball = tcore.find_ball(bins_by_index[idx], tag)
            if ball is not None:
                current = [int(i) for i in ball.ids]
                break
        merged = list(current)
        seen = set(current)
        for i in carried:
            if i not in seen:
                seen.add(i)
                merged.append(int(i))
        if len(merged) > tcore.params.page_size:
            raise WorkbenchError("layer overflow set exceeds its page size")
        split, _ = tcore.apply_update(bins_by_index, pair1, pair2, token, 1, merged)
        assert not split
        applied = all(tcore.bin_fits(balls) for balls in bins_by_index.values())
        if applied:
            blobs_out = {idx: tcore.encrypt_bin(balls) for idx, balls in bins_by_index.items()}
        else:
            blobs_out = {
                idx: tcore.encrypt_bin(tcore.decrypt_bin(orig)) for idx, orig in originals.items()
            }
            new_bucket = crypto.encrypt_padded(
                self.keys.clip_enc,
                clipped.build_bucket(
                    clipped.parse_bucket(crypto.decrypt_padded(self.keys.clip_enc, bucket_blob)),
                    self.params.clip.tau,
                ),
                self.params.clip.bucket_plain_words * WORD_BYTES,
            ).blob
            superseded = 0
        mask = len_mask(self.keys.layers[target].prf, token)
        commit = bytes([1 if applied else 0, 1 if applied else 0])
        commit += struct.pack("<H", 1 ^ mask)
        commit += struct.pack("<I", superseded)
        commit += new_bucket
        commit += b"".join(blobs_out[idx] for idx in indices)
        self.transport.rpc(bytes([MSG_COMMIT]) + commit, "update-commit")
        return "applied" if applied else "rejected"


def build_local(chain: KeyChain, params: LocalParams, db: dict, hash_override=None):
    """Construct (server, client) over one shared traced store."""
    total = sum(len(v) for v in db.values())
    if total > params.n_total:
        raise WorkbenchError(f"{total} identifiers exceed the bound {params.n_total}")
    bound = params.clip.longest_list_bound
    for token, ids in db.items():
        if len(ids) > bound:
            import warnings

            warnings.warn("list above the overflow bound; clip analysis degrades", stacklevel=2)
            break
    keys = LocalKeys.from_chain(chain, params.num_levels)
    server = LocalServer(params, keys.addr, hash_override)
    server.clip.enc = keys.clip_enc

    op = server.store.begin_op("setup")
    for token, ids in db.items():
        ct = crypto.encrypt_padded(keys.keyword_key(token), struct.pack("<I", len(ids)), 4)
        server.table.write(token, ct.blob)
    clip_map = server.clip.install(db)
    layer_dbs: list[dict] = [dict() for _ in range(params.num_levels + 1)]
    for token, ids in db.items():
        layer_dbs[level_of(len(ids))][token] = clip_map.get(token, [])
    for i, layer_db in enumerate(layer_dbs):
        core = BinnedClientCore(params.layer_params(i), keys.layers[i])
        bins, len_entries, full_pages = binned.prepare_image(core, layer_db, register_empty=True)
        if full_pages:
            raise WorkbenchError("layer lists must fit one of its pages")
        binned.install_image(server.layer_cores[i], bins, len_entries, full_pages,
                             chain.seed64(f"layer{i}-filler"))
    server.store.end_op(op)

    from .transport import LoopbackTransport

    client = LocalClient(params, keys, LoopbackTransport(server.handle))
    return server, client
