import pytest

from sselab.crypto import KeyChain


@pytest.fixture
def chain():
    return KeyChain.from_seed(0xC0FFEE)


def token_of(i: int) -> bytes:
    return bytes([i % 251 + 1, (i // 251) % 251]) * 16
