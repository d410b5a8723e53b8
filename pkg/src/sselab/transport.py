"""Length-prefixed byte framing with loopback and TCP request/response links.

Every protocol message travels as ``u32 length || body``. The loopback link
calls the server handler in-process; the TCP link speaks the identical
framing over a socket, so transcripts are byte-compatible.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable

_LEN = struct.Struct("<I")


def encode_frame(body: bytes) -> bytes:
    return _LEN.pack(len(body)) + body


def read_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, 4)
    (length,) = _LEN.unpack(header)
    return _recv_exact(sock, length)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        part = sock.recv(n)
        if not part:
            raise ConnectionError("peer closed")
        chunks.append(part)
        n -= len(part)
    return b"".join(chunks)


@dataclass
class Transcript:
    """Ordered protocol messages with byte lengths and trace op ids."""

    entries: list = field(default_factory=list)  # (direction, nbytes, op_hint)

    def note(self, direction: str, nbytes: int, op_hint: str = ""):
        self.entries.append((direction, nbytes, op_hint))

    def lengths(self):
        return [(d, n) for d, n, _ in self.entries]


class LoopbackTransport:
    """In-process request/response link around a handler callable."""

    def __init__(self, handler: Callable[[bytes], bytes], transcript: Transcript | None = None):
        self._handler = handler
        self.transcript = transcript if transcript is not None else Transcript()

    def rpc(self, request: bytes, op_hint: str = "") -> bytes:
        # Framing is applied and stripped symmetrically so recorded lengths
        # match the TCP link byte for byte.
        wire = encode_frame(request)
        self.transcript.note("c->s", len(wire), op_hint)
        response = self._handler(request)
        self.transcript.note("s->c", len(encode_frame(response)), op_hint)
        return response


class TcpServer:
    """Minimal framed request/response server; one connection at a time."""

    def __init__(self, handler: Callable[[bytes], bytes], host: str = "127.0.0.1", port: int = 0):
        self._handler = handler
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._stop = threading.Event()

    def start(self):
        self._thread.start()
        return self

    def _serve(self):
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            with conn:
                try:
                    while True:
                        request = read_frame(conn)
                        conn.sendall(encode_frame(self._handler(request)))
                except ConnectionError:
                    pass

    def close(self):
        self._stop.set()
        self._thread.join(timeout=2)
        self._sock.close()


class TcpTransport:
    """Client side of the framed TCP link."""

    def __init__(self, host: str, port: int, transcript: Transcript | None = None):
        self._sock = socket.create_connection((host, port))
        self.transcript = transcript if transcript is not None else Transcript()

    def rpc(self, request: bytes, op_hint: str = "") -> bytes:
        wire = encode_frame(request)
        self.transcript.note("c->s", len(wire), op_hint)
        self._sock.sendall(wire)
        response = read_frame(self._sock)
        self.transcript.note("s->c", len(encode_frame(response)), op_hint)
        return response

    def close(self):
        self._sock.close()
