"""Experiment driver: synthetic databases, workload execution with a
built-in plaintext oracle, and CSV reporting.

Every run is deterministic from its seed: keyword tokens, identifiers, the
op stream, and all scheme keys derive from one 64-bit value, and the CSV
carries no timestamps, so repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import binned, clipped, localidx
from .allocator import TieredTwoChoiceAllocator, rng_choice_fn
from .binned import BinnedParams, TwinIndex
from .clipped import ClippedParams, build_clipped
from .crypto import KeyChain, prf
from .errors import BadSpec, CapacityExceeded, UnknownKeyword
from .localidx import LocalParams, build_local
from .oram import OramParams, ReadOnlyOram
from .params import AllocParams, DEFAULT_LOAD_CONST

SCHEMES = ("layered", "clip", "local-layered", "loc-oram-demo", "alloc-stats")

REPORT_HEADER = [
    "scheme", "seed", "N", "p", "op_id", "label", "locality",
    "read_eff", "page_eff", "storage_eff", "overflow_count", "max_load",
]
ALLOC_HEADER = ["seed", "w_max", "m", "delta_mode", "trial", "max_load", "capacity", "overflowed"]

EXIT_OK = 0
EXIT_MISMATCH = 2
EXIT_OVERFLOW = 3
EXIT_BADSPEC = 4


@dataclass
class WorkloadSpec:
    seed: int = 0
    n_total: int = 2**14
    page_size: int = 16
    scheme: str = "layered"
    dist: str = "single:16"  # kind:param
    mix: tuple = (40, 40, 20)  # search%, add%, delete%
    ops: int = 1000
    fill: float = 0.5  # fraction of n_total placed at setup
    alpha: int = 4
    d: int = 1
    load_const: float = DEFAULT_LOAD_CONST
    delta_mode: str = "logloglog"
    rtt: str = "two_rtt"
    lam: int = 128
    cap_longest: bool = False
    trials: int = 100  # alloc-stats
    oram_c: int = 3
    oram_beta: int = None
    db_path: str = None  # pre-generated database file

    def validate(self):
        if self.scheme not in SCHEMES:
            raise BadSpec(f"unknown scheme {self.scheme!r}")
        if sum(self.mix) != 100 or any(m < 0 for m in self.mix):
            raise BadSpec("mix percentages must be non-negative and sum to 100")
        if self.ops < 0 or self.n_total < 1 or self.page_size < 1:
            raise BadSpec("counts must be positive")
        kind = self.dist.split(":", 1)[0]
        if kind not in ("uniform", "zipf", "single", "adversarial-script"):
            raise BadSpec(f"unknown distribution {self.dist!r}")


# --------------------------------------------------------------------------
# database generation


def keyword_token(chain: KeyChain, index: int) -> bytes:
    """Keyword tokens are already PRF images; raw keywords never leave the
    generator."""
    return prf(chain.prf_key("keywords"), b"kw%d" % index)


def _lengths_for(spec: WorkloadSpec, budget: int, rng: np.random.Generator) -> list:
    kind, _, arg = spec.dist.partition(":")
    lengths = []
    if kind == "single":
        ell = int(arg or 1)
        lengths = [ell] * (budget // ell)
    elif kind == "uniform":
        ell = int(arg or 16)
        while budget > 0:
            take = int(rng.integers(1, min(ell, budget) + 1))
            lengths.append(take)
            budget -= take
    elif kind == "zipf":
        s = float(arg or 1.0)
        cap = spec.n_total / (math.log2(max(spec.n_total, 2)) ** spec.d)
        r = 1
        while budget > 0:
            length = max(1, int(budget * 0.2 / (r**s)))
            if spec.cap_longest:
                length = min(length, int(cap))
            length = min(length, budget)
            lengths.append(length)
            budget -= length
            r += 1
    else:
        raise BadSpec(f"distribution {spec.dist!r} has no generator")
    return lengths


def gen_db(spec: WorkloadSpec) -> dict:
    """Deterministic database for the spec; total size <= fill * n_total."""
    spec.validate()
    kind = spec.dist.split(":", 1)[0]
    if kind == "adversarial-script":
        db, _ = load_script(spec)
        return db
    chain = KeyChain.from_seed(spec.seed).child("database")
    rng = np.random.default_rng(chain.seed64("lengths"))
    budget = int(spec.fill * spec.n_total)
    lengths = _lengths_for(spec, budget, rng)
    total = sum(lengths)
    ids = rng.permutation(np.arange(1, total + 1, dtype=np.uint64)).tolist()
    db = {}
    pos = 0
    for i, length in enumerate(lengths):
        db[keyword_token(chain, i)] = ids[pos : pos + length]
        pos += length
    return db


DB_MAGIC = b"SSDB"


def save_db(db: dict, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC + struct.pack("<II", 1, len(db)))
        for token, ids in db.items():
            fh.write(token + struct.pack("<I", len(ids)))
            fh.write(np.array(ids, dtype="<u8").tobytes())


def load_db(path: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DB_MAGIC:
        raise BadSpec("not a database file")
    _, count = struct.unpack_from("<II", blob, 4)
    db = {}
    pos = 12
    for _ in range(count):
        token = blob[pos : pos + 32]
        (n,) = struct.unpack_from("<I", blob, pos + 32)
        pos += 36
        db[token] = np.frombuffer(blob[pos : pos + 8 * n], dtype="<u8").tolist()
        pos += 8 * n
    return db


def load_script(spec: WorkloadSpec):
    """Adversarial script: explicit database and op list in JSON."""
    path = spec.dist.split(":", 1)[1]
    with open(path) as fh:
        doc = json.load(fh)
    chain = KeyChain.from_seed(spec.seed).child("database")
    rng = np.random.default_rng(chain.seed64("script-ids"))
    db = {}
    next_id = 1
    for kw_index, length in doc.get("db", []):
        db[keyword_token(chain, kw_index)] = list(range(next_id, next_id + length))
        next_id += length
    ops = []
    for entry in doc.get("ops", []):
        ops.append(tuple(entry))
    return db, ops


# --------------------------------------------------------------------------
# the plaintext reference


class Oracle:
    """Reference map mirroring applied operations only."""

    def __init__(self, db: dict):
        self.added = {token: list(dict.fromkeys(int(i) for i in ids)) for token, ids in db.items()}
        self.deleted = {}
        self.clipped = {}
        self.history_words = {token: len(ids) for token, ids in self.added.items()}

    def tokens(self):
        return list(self.added)

    def add(self, token, ids):
        cur = self.added.setdefault(token, [])
        seen = set(cur)
        for i in ids:
            if int(i) not in seen:
                cur.append(int(i))
                seen.add(int(i))
        self.history_words[token] = self.history_words.get(token, 0) + len(ids)

    def delete(self, token, ids):
        cur = self.deleted.setdefault(token, set())
        cur.update(int(i) for i in ids)
        self.history_words[token] = self.history_words.get(token, 0) + len(ids)

    def clip(self, token, ids):
        self.clipped.setdefault(token, set()).update(int(i) for i in ids)

    def expect_search(self, token):
        removed = self.deleted.get(token, set())
        return [i for i in self.added.get(token, []) if i not in removed]

    def expect_stored(self, token):
        clipped_ids = self.clipped.get(token, set())
        return [i for i in self.added.get(token, []) if i not in clipped_ids]

    def plaintext_words(self) -> int:
        total = 0
        for token, ids in self.added.items():
            removed = self.deleted.get(token, set())
            total += sum(1 for i in ids if i not in removed)
        return total

    def answer_words(self, token) -> int:
        return self.history_words.get(token, 0)


# --------------------------------------------------------------------------
# runners


class _Report:
    def __init__(self, spec: WorkloadSpec, out):
        self.spec = spec
        self.writer = csv.writer(out)
        self.writer.writerow(REPORT_HEADER)
        self.rows = 0
        self.overflow_count = 0

    def emit(self, op_id, label, metrics, answer, storage_eff, max_load=""):
        p = self.spec.page_size
        read_eff = metrics.read_words / max(1, answer)
        page_eff = metrics.pages_touched / max(1, -(-answer // p))
        self.writer.writerow([
            self.spec.scheme, self.spec.seed, self.spec.n_total, p,
            op_id, label, metrics.locality,
            f"{read_eff:.4f}", f"{page_eff:.4f}", f"{storage_eff:.4f}",
            self.overflow_count, max_load,
        ])
        self.rows += 1


class _OpStream:
    """Seeded op generator honoring the mix percentages."""

    def __init__(self, spec: WorkloadSpec, oracle: Oracle, rng: np.random.Generator,
                 single_id_adds: bool):
        self.spec = spec
        self.oracle = oracle
        self.rng = rng
        self.single = single_id_adds
        self.tokens = oracle.tokens()
        self.budget = spec.n_total - oracle.plaintext_words()
        self.next_id = 1 + sum(len(v) for v in oracle.added.values())

    def __iter__(self):
        searches, adds, deletes = self.spec.mix
        for _ in range(self.spec.ops):
            roll = self.rng.integers(100)
            token = self.tokens[self.rng.integers(len(self.tokens))]
            if roll < searches or not self.tokens:
                yield ("search", token, None)
            elif roll < searches + adds:
                if self.single:
                    size = 1
                else:
                    size = int(self.rng.integers(1, max(2, self.spec.page_size // 2)))
                size = min(size, self.budget)
                if size <= 0:
                    yield ("search", token, None)
                    continue
                ids = list(range(self.next_id, self.next_id + size))
                self.next_id += size
                self.budget -= size
                yield ("add", token, ids)
            else:
                current = self.oracle.expect_search(token)
                if not current:
                    yield ("search", token, None)
                    continue
                take = int(self.rng.integers(1, min(len(current), 4) + 1))
                picks = self.rng.choice(len(current), size=take, replace=False)
                yield ("delete", token, [current[i] for i in picks])


def _drain(store, cursor: int):
    new = store.metrics_log[cursor:]
    return new, len(store.metrics_log)


def run(spec: WorkloadSpec, out) -> int:
    """Execute the workload; returns the process exit code."""
    try:
        spec.validate()
    except BadSpec:
        return EXIT_BADSPEC
    try:
        if spec.scheme == "alloc-stats":
            return _run_alloc_stats(spec, out)
        if spec.scheme == "loc-oram-demo":
            return _run_oram(spec, out)
        return _run_sse(spec, out)
    except BadSpec:
        return EXIT_BADSPEC
    except CapacityExceeded:
        return EXIT_OVERFLOW


def _load_workload(spec: WorkloadSpec):
    if spec.db_path:
        db = load_db(spec.db_path)
        script_ops = None
    elif spec.dist.startswith("adversarial-script:"):
        db, script_ops = load_script(spec)
    else:
        db = gen_db(spec)
        script_ops = None
    return db, script_ops


def _run_sse(spec: WorkloadSpec, out) -> int:
    db, script_ops = _load_workload(spec)
    chain = KeyChain.from_seed(spec.seed).child(spec.scheme)
    oracle = Oracle(db)
    report = _Report(spec, out)
    rng = np.random.default_rng(KeyChain.from_seed(spec.seed).seed64("ops"))

    if spec.scheme == "layered":
        params = BinnedParams(spec.n_total, spec.page_size, spec.lam, spec.delta_mode,
                              spec.load_const)
        scheme = TwinIndex(chain, params, db, rtt_mode=spec.rtt)
        stores = [("add", scheme.add_server.store), ("del", scheme.del_server.store)]
    elif spec.scheme == "clip":
        if spec.mix[2]:
            raise BadSpec("the clipped store has no delete operation")
        params = ClippedParams(spec.n_total, spec.alpha, spec.d)
        server, client, clip0 = build_clipped(chain, params, db, spec.page_size)
        for token, ids in clip0.items():
            oracle.clip(token, ids)
        report.overflow_count = sum(len(v) for v in clip0.values())
        scheme = (server, client)
        stores = [("", server.store)]
    elif spec.scheme == "local-layered":
        lparams = LocalParams(spec.n_total, spec.alpha, spec.d, spec.lam,
                              spec.delta_mode, spec.load_const, spec.page_size)
        add_server, add_client = build_local(chain.child("add"), lparams, db)
        del_server, del_client = build_local(chain.child("del"), lparams, {})
        stores = [("add", add_server.store), ("del", del_server.store)]
    else:
        raise BadSpec(spec.scheme)

    cursors = {name: len(store.metrics_log) for name, store in stores}
    current_token = [None]

    def emit_new():
        storage = sum(store.words for _, store in stores) / max(1, oracle.plaintext_words())
        answer = oracle.answer_words(current_token[0]) if current_token[0] else 1
        for name, store in stores:
            new, cursors[name] = _drain(store, cursors[name])
            for metrics in new:
                label = metrics.label + (f"/{name}" if name else "")
                report.emit(report.rows, label, metrics, answer, storage)

    exit_code = EXIT_OK
    single_adds = spec.scheme in ("local-layered", "clip")
    ops = script_ops if script_ops is not None else _OpStream(spec, oracle, rng, single_adds)

    for op in ops:
        kind, token, payload = op[0], op[1], op[2] if len(op) > 2 else None
        if isinstance(token, int):
            token = keyword_token(KeyChain.from_seed(spec.seed).child("database"), token)
        current_token[0] = token
        if kind == "search":
            if spec.scheme == "layered":
                got = scheme.search(token)
                want = oracle.expect_search(token)
            elif spec.scheme == "clip":
                got = scheme[1].search(token)
                want = oracle.expect_stored(token)
            else:
                try:
                    got = add_client.search(token)
                except UnknownKeyword:
                    got = []
                try:
                    removed = set(del_client.search(token))
                except UnknownKeyword:
                    removed = set()
                got = [i for i in got if i not in removed]
                want = oracle.expect_search(token)
            if sorted(got) != sorted(want):
                exit_code = EXIT_MISMATCH
        elif kind == "add":
            if spec.scheme == "layered":
                outcome = scheme.add(token, payload)
                if outcome == "applied":
                    oracle.add(token, payload)
                else:
                    report.overflow_count += 1
            elif spec.scheme == "clip":
                for ident in payload:
                    clip = scheme[1].update_add(token, ident)
                    oracle.add(token, [ident])
                    if clip:
                        oracle.clip(token, clip)
                        report.overflow_count += len(clip)
            else:
                for ident in payload:
                    outcome = add_client.update_add(token, ident)
                    if outcome == "applied":
                        oracle.add(token, [ident])
                    else:
                        report.overflow_count += 1
        elif kind == "delete":
            if spec.scheme == "layered":
                outcome = scheme.delete(token, payload)
                if outcome == "applied":
                    oracle.delete(token, payload)
                else:
                    report.overflow_count += 1
            elif spec.scheme == "local-layered":
                for ident in payload:
                    outcome = del_client.update_add(token, ident)
                    if outcome == "applied":
                        oracle.delete(token, [ident])
                    else:
                        report.overflow_count += 1
            else:
                raise BadSpec("delete unsupported for this scheme")
        else:
            raise BadSpec(f"unknown op {kind!r}")
        emit_new()

    return exit_code


def _run_oram(spec: WorkloadSpec, out) -> int:
    params = OramParams(spec.n_total, spec.oram_c, spec.oram_beta)
    chain = KeyChain.from_seed(spec.seed).child("oram")
    memory = {k: [k] * (params.beta - 1) for k in range(1, params.n + 1)}
    oram = ReadOnlyOram(params, chain, memory)
    report = _Report(spec, out)
    rng = np.random.default_rng(KeyChain.from_seed(spec.seed).seed64("accesses"))
    exit_code = EXIT_OK
    k = 1
    for i in range(spec.ops):
        value, metrics = oram.access(k)
        if value != memory[k]:
            exit_code = EXIT_MISMATCH
        # adaptive: the next index depends on the value just read
        k = 1 + (int(value[0]) + int(rng.integers(params.n))) % params.n
        report.emit(i, "access", metrics, params.beta, oram.store.words / (params.n * params.beta))
    return exit_code


def alloc_trial_workload(w_max: float, trial: int, rng: np.random.Generator):
    """(weights, update walk count) for one statistical trial; the kinds
    rotate so the sweep covers small, mixed, and heavy weights."""
    kind = trial % 5
    if kind == 0:
        weights = np.full(int(w_max), 1.0)
    elif kind == 1:
        weights = rng.random(int(2 * w_max))
        weights = weights[np.cumsum(weights) <= w_max]
    elif kind == 2:
        weights = np.full(int(2 * w_max), 0.5)
    elif kind == 3:
        m = AllocParams(w_max).num_bins
        unit = 1.0 / math.log2(max(m, 4))
        weights = np.full(int(w_max / unit), unit)
    else:
        weights = np.where(rng.random(int(4 * w_max)) < 0.5, 0.05, 0.9)
        weights = weights[np.cumsum(weights) <= w_max]
    return weights


def _run_alloc_stats(spec: WorkloadSpec, out) -> int:
    writer = csv.writer(out)
    writer.writerow(ALLOC_HEADER)
    w_max = max(1.0, spec.n_total / spec.page_size)
    params = AllocParams(w_max, spec.lam, spec.delta_mode, spec.load_const)
    any_overflow = False
    for trial in range(spec.trials):
        rng = np.random.default_rng(
            KeyChain.from_seed(spec.seed).seed64(f"alloc/{trial}")
        )
        weights = alloc_trial_workload(w_max, trial, rng)
        # hold back a slice of the weight budget for growth updates
        grow = len(weights) // 10
        state = TieredTwoChoiceAllocator(params, rng_choice_fn(params.num_bins, rng))
        idents = [b"ball%d" % i for i in range(len(weights))]
        for i, w in enumerate(weights):
            scale = 0.5 if i < grow else 1.0
            state.insert_ball(idents[i], float(w) * scale)
        for i in range(grow):
            state.update_ball(idents[i], float(weights[i]) * 0.5, float(weights[i]))
        overflowed = state.overflow_check()
        any_overflow = any_overflow or overflowed
        writer.writerow([
            spec.seed, int(w_max), params.num_bins, spec.delta_mode, trial,
            f"{state.max_load():.4f}", f"{params.capacity:.4f}", int(overflowed),
        ])
    return EXIT_OVERFLOW if any_overflow else EXIT_OK
