"""Keyed randomness, length-padded encryption, bin-choice hashing, and a
small-domain permutation.

Everything above this module is crypto-agnostic. A single 64-bit experiment
seed derives every key through a labelled HMAC tree (see ``KeyChain``), so
runs are reproducible bit for bit; only AEAD nonces are drawn fresh, and no
reported metric depends on them.

Derivation tree::

    root = SHA256("sselab/v1" || seed_le64)
    child(root, label) = HMAC-SHA256(root, label)

labels compose with '/' (e.g. "layered-add/enc", "oram/prp/2/epoch/7").
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import DecryptError, DomainError, PlaintextTooLong

KEY_VERSION = 1
TAG_LEN = 32
PAD_OVERHEAD = 32  # 12B nonce + 4B length prefix + 16B GCM tag
_NONCE_LEN = 12


class PrfKey:
    """Fixed-length secret key for the keyed hash. At least 16 bytes."""

    __slots__ = ("data",)

    def __init__(self, data: bytes):
        if len(data) < 16:
            raise ValueError("PRF key must be at least 16 bytes")
        self.data = bytes(data)

    def to_bytes(self) -> bytes:
        return struct.pack("<I", KEY_VERSION) + self.data

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PrfKey":
        (version,) = struct.unpack_from("<I", blob)
        if version != KEY_VERSION:
            raise DecryptError(f"unsupported key version {version}")
        return cls(blob[4:])

    def __eq__(self, other):
        return isinstance(other, PrfKey) and hmac.compare_digest(self.data, other.data)

    def __hash__(self):
        return hash((type(self).__name__, self.data))


class EncKey:
    """Fixed-length secret key for the padded AEAD."""

    __slots__ = ("data", "_aead")

    def __init__(self, data: bytes):
        if len(data) != 32:
            raise ValueError("encryption key must be 32 bytes")
        self.data = bytes(data)
        self._aead = AESGCM(self.data)

    def to_bytes(self) -> bytes:
        return struct.pack("<I", KEY_VERSION) + self.data

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncKey":
        (version,) = struct.unpack_from("<I", blob)
        if version != KEY_VERSION:
            raise DecryptError(f"unsupported key version {version}")
        return cls(blob[4:])

    def __eq__(self, other):
        return isinstance(other, EncKey) and hmac.compare_digest(self.data, other.data)

    def __hash__(self):
        return hash((type(self).__name__, self.data))


@dataclass(frozen=True)
class Ciphertext:
    """Opaque padded ciphertext; blob length depends only on the pad target."""

    blob: bytes
    declared_len: int


def prf(key: PrfKey, data: bytes) -> bytes:
    """Deterministic 32-byte tag; HMAC-SHA256."""
    return hmac.new(key.data, data, hashlib.sha256).digest()


def ciphertext_len(target_len: int) -> int:
    return target_len + PAD_OVERHEAD


def encrypt_padded(key: EncKey, plaintext: bytes, target_len: int) -> Ciphertext:
    """Zero-pad to ``target_len`` and encrypt; blob length is target_len + 32.

    The true length rides inside the ciphertext, so nothing about the
    plaintext (including its length) shows on the outside.
    """
    if len(plaintext) > target_len:
        raise PlaintextTooLong(f"{len(plaintext)} > pad target {target_len}")
    padded = struct.pack("<I", len(plaintext)) + plaintext + b"\x00" * (target_len - len(plaintext))
    nonce = os.urandom(_NONCE_LEN)
    blob = nonce + key._aead.encrypt(nonce, padded, None)
    return Ciphertext(blob, len(plaintext))


def decrypt_padded(key: EncKey, ct: "Ciphertext | bytes") -> bytes:
    """Invert encrypt_padded exactly; DecryptError on tampering."""
    blob = ct.blob if isinstance(ct, Ciphertext) else ct
    if len(blob) < PAD_OVERHEAD:
        raise DecryptError("ciphertext too short")
    try:
        padded = key._aead.decrypt(blob[:_NONCE_LEN], blob[_NONCE_LEN:], None)
    except InvalidTag as exc:
        raise DecryptError("authentication failed") from exc
    (true_len,) = struct.unpack_from("<I", padded)
    if true_len > len(padded) - 4:
        raise DecryptError("corrupted length prefix")
    return padded[4 : 4 + true_len]


class SlotCipher:
    """Length-preserving cipher for write-once, fixed-size table slots.

    AES-XTS keyed per table, tweaked per slot index. Slots are written once
    and never rewritten, so the deterministic mode leaks nothing beyond slot
    occupancy; in exchange the ciphertext is exactly as long as the slot.
    """

    __slots__ = ("_key",)

    def __init__(self, key_material: bytes):
        if len(key_material) != 64:
            raise ValueError("slot cipher needs 64 bytes of key material")
        self._key = key_material

    def _cipher(self, tweak_index: int) -> Cipher:
        tweak = tweak_index.to_bytes(16, "little")
        return Cipher(algorithms.AES(self._key), modes.XTS(tweak))

    def encrypt(self, tweak_index: int, data: bytes) -> bytes:
        enc = self._cipher(tweak_index).encryptor()
        return enc.update(data) + enc.finalize()

    def decrypt(self, tweak_index: int, data: bytes) -> bytes:
        dec = self._cipher(tweak_index).decryptor()
        return dec.update(data) + dec.finalize()


def hash_choices(tag: bytes, num_bins: int) -> tuple[int, int]:
    """Two bin choices from disjoint 16-byte halves of a 32-byte tag.

    128-bit modular reduction per index; residual bias is <= 2^-64 and
    accepted. The two choices may coincide.
    """
    if num_bins < 1:
        raise DomainError("need at least one bin")
    if len(tag) != TAG_LEN:
        raise ValueError("tag must be 32 bytes")
    a = int.from_bytes(tag[:16], "little") % num_bins
    b = int.from_bytes(tag[16:], "little") % num_bins
    return a, b


class SmallDomainPrp:
    """Keyed bijection on [0, n): 4-round Feistel with cycle-walking.

    The Feistel network runs over the smallest even number of bits covering
    the domain; outputs outside [0, n) are walked back through the network.
    Simulation-grade pseudorandomness, exactly invertible.
    """

    ROUNDS = 4

    def __init__(self, key: PrfKey, n: int):
        if n < 1:
            raise DomainError("empty domain")
        self.n = n
        bits = max(2, (n - 1).bit_length())
        if bits % 2:
            bits += 1
        self._half = bits // 2
        self._mask = (1 << self._half) - 1
        self._space = 1 << bits
        self._round_keys = [
            hmac.new(key.data, struct.pack("<BI", r, n), hashlib.sha256).digest()
            for r in range(self.ROUNDS)
        ]

    def _round(self, r: int, value: int) -> int:
        digest = hmac.new(self._round_keys[r], value.to_bytes(8, "little"), hashlib.sha256).digest()
        return int.from_bytes(digest[:8], "little") & self._mask

    def _feistel(self, x: int) -> int:
        left, right = x >> self._half, x & self._mask
        for r in range(self.ROUNDS):
            left, right = right, left ^ self._round(r, right)
        return (left << self._half) | right

    def _feistel_inv(self, y: int) -> int:
        left, right = y >> self._half, y & self._mask
        for r in reversed(range(self.ROUNDS)):
            left, right = right ^ self._round(r, left), left
        return (left << self._half) | right

    def eval(self, x: int) -> int:
        if not 0 <= x < self.n:
            raise DomainError(f"{x} outside [0, {self.n})")
        if self.n == 1:
            return 0
        y = self._feistel(x)
        while y >= self.n:
            y = self._feistel(y)
        return y

    def invert(self, y: int) -> int:
        if not 0 <= y < self.n:
            raise DomainError(f"{y} outside [0, {self.n})")
        if self.n == 1:
            return 0
        x = self._feistel_inv(y)
        while x >= self.n:
            x = self._feistel_inv(x)
        return x


def prp_eval(key: PrfKey, n: int, x: int) -> int:
    return SmallDomainPrp(key, n).eval(x)


def prp_invert(key: PrfKey, n: int, y: int) -> int:
    return SmallDomainPrp(key, n).invert(y)


class KeyChain:
    """Deterministic labelled key derivation from a 64-bit experiment seed."""

    __slots__ = ("_root",)

    def __init__(self, root: bytes):
        self._root = root

    @classmethod
    def from_seed(cls, seed: int) -> "KeyChain":
        root = hashlib.sha256(b"sselab/v1" + struct.pack("<Q", seed & (2**64 - 1))).digest()
        return cls(root)

    def _derive(self, label: str) -> bytes:
        return hmac.new(self._root, label.encode(), hashlib.sha256).digest()

    def child(self, label: str) -> "KeyChain":
        return KeyChain(self._derive("chain/" + label))

    def prf_key(self, label: str) -> PrfKey:
        return PrfKey(self._derive("prf/" + label))

    def enc_key(self, label: str) -> EncKey:
        return EncKey(self._derive("enc/" + label))

    def slot_key(self, label: str) -> SlotCipher:
        return SlotCipher(self._derive("slot-a/" + label) + self._derive("slot-b/" + label))

    def seed64(self, label: str) -> int:
        return int.from_bytes(self._derive("seed/" + label)[:8], "little")
