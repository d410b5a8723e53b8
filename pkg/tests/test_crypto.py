import collections
import math

import pytest
from hypothesis import given, settings, strategies as st

from sselab import crypto
from sselab.crypto import (Ciphertext, EncKey, KeyChain, PrfKey, SmallDomainPrp,
                           decrypt_padded, encrypt_padded, hash_choices, prf,
                           prp_eval, prp_invert)
from sselab.errors import DecryptError, DomainError, PlaintextTooLong


@pytest.fixture
def keys(chain):
    return chain.prf_key("t"), chain.enc_key("t")


def test_prf_deterministic(keys):
    k, _ = keys
    assert prf(k, b"hello") == prf(k, b"hello")
    assert len(prf(k, b"hello")) == 32


def test_prf_distinct_inputs(chain):
    # sampling check: no collisions over 10^5 random inputs
    k = chain.prf_key("t")
    seen = set()
    for i in range(100_000):
        seen.add(prf(k, i.to_bytes(4, "little")))
    assert len(seen) == 100_000


def test_prf_distinct_keys(chain):
    k1, k2 = chain.prf_key("a"), chain.prf_key("b")
    for i in range(1000):
        data = i.to_bytes(4, "little")
        assert prf(k1, data) != prf(k2, data)


def test_key_serialization_roundtrip(keys):
    k, e = keys
    assert PrfKey.from_bytes(k.to_bytes()) == k
    assert EncKey.from_bytes(e.to_bytes()) == e
    assert k.to_bytes()[:4] == (1).to_bytes(4, "little")


def test_keychain_deterministic():
    a = KeyChain.from_seed(7).child("x").enc_key("y")
    b = KeyChain.from_seed(7).child("x").enc_key("y")
    c = KeyChain.from_seed(8).child("x").enc_key("y")
    assert a == b
    assert a != c


# -- padded encryption -------------------------------------------------------


def test_encrypt_empty_plaintext(keys):
    _, e = keys
    ct = encrypt_padded(e, b"", 64)
    assert len(ct.blob) == crypto.ciphertext_len(64)
    assert decrypt_padded(e, ct) == b""


def test_ciphertext_length_is_function_of_target_only(keys):
    _, e = keys
    a = encrypt_padded(e, b"0123456789", 64)
    b = encrypt_padded(e, b"abcdefghij", 64)
    assert len(a.blob) == len(b.blob)


@given(st.binary(min_size=0, max_size=1024))
@settings(max_examples=50, deadline=None)
def test_encrypt_roundtrip(payload):
    e = KeyChain.from_seed(1).enc_key("rt")
    ct = encrypt_padded(e, payload, 1024)
    assert len(ct.blob) == 1024 + crypto.PAD_OVERHEAD
    assert decrypt_padded(e, ct) == payload


def test_plaintext_too_long(keys):
    _, e = keys
    with pytest.raises(PlaintextTooLong):
        encrypt_padded(e, b"x" * 65, 64)


def test_tamper_detection(keys):
    _, e = keys
    blob = bytearray(encrypt_padded(e, b"secret", 64).blob)
    blob[20] ^= 1
    with pytest.raises(DecryptError):
        decrypt_padded(e, bytes(blob))


def test_ciphertext_length_constant_over_corpus(keys):
    _, e = keys
    lengths = {len(encrypt_padded(e, bytes([i]) * i, 100).blob) for i in range(100)}
    assert len(lengths) == 1


# -- slot cipher ---------------------------------------------------------------


def test_slot_cipher_roundtrip_and_length(chain):
    sc = chain.slot_key("slots")
    data = bytes(range(128))
    ct = sc.encrypt(5, data)
    assert len(ct) == len(data)
    assert sc.decrypt(5, ct) == data
    assert sc.decrypt(6, ct) != data  # different tweak, different plaintext


# -- bin-choice hashing ----------------------------------------------------------


def test_hash_choices_single_bin():
    assert hash_choices(b"\x07" * 32, 1) == (0, 0)


def test_hash_choices_golden():
    # frozen from a reference evaluation of the derivation tree at seed 42
    k = KeyChain.from_seed(42).prf_key("golden")
    tag = prf(k, b"fixed-input")
    assert tag.hex() == "0da29eebaffc47c6c7856485269cef8e20f5266ced7dbe0e3e1d004cc144caf2"
    assert hash_choices(tag, 8) == (5, 0)
    assert hash_choices(tag, 5) == (4, 1)


def test_hash_choices_uniformity(chain):
    # chi-square style check: each index frequency within 3 sigma of uniform
    k = chain.prf_key("uni")
    m = 16
    counts = collections.Counter()
    trials = 100_000
    for i in range(trials):
        a, b = hash_choices(prf(k, i.to_bytes(4, "little")), m)
        counts[a] += 1
        counts[b] += 1
    expected = 2 * trials / m
    sigma = math.sqrt(2 * trials * (1 / m) * (1 - 1 / m))
    for idx in range(m):
        assert abs(counts[idx] - expected) < 3.3 * sigma


# -- small-domain permutation ------------------------------------------------------


def test_prp_trivial_domain(chain):
    k = chain.prf_key("prp")
    assert prp_eval(k, 1, 0) == 0
    assert prp_invert(k, 1, 0) == 0


@pytest.mark.parametrize("n", [2, 3, 10, 100, 257, 4096])
def test_prp_is_permutation(chain, n):
    prp = SmallDomainPrp(chain.prf_key(f"prp{n}"), n)
    outputs = [prp.eval(x) for x in range(n)]
    assert sorted(outputs) == list(range(n))


def test_prp_invert(chain):
    prp = SmallDomainPrp(chain.prf_key("inv"), 1000)
    for x in range(0, 1000, 10):
        assert prp.invert(prp.eval(x)) == x


def test_prp_domain_error(chain):
    prp = SmallDomainPrp(chain.prf_key("dom"), 10)
    with pytest.raises(DomainError):
        prp.eval(10)
    with pytest.raises(DomainError):
        prp.invert(-1)


def test_ciphertext_dataclass():
    ct = Ciphertext(b"abc", 3)
    assert ct.blob == b"abc" and ct.declared_len == 3
