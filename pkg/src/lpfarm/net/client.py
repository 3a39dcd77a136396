"""Blocking request/reply client for short-lived tools (CLI, tests)."""
from __future__ import annotations

import socket
import time

from ..lpf.errors import RemoteUnreachable
from ..lpf.message import Address, Message
from .wire import MalformedFrame, decode_stream, encode_message


class ClientTimeout(Exception):
    pass


class Client:
    """A minimal message loop: one connection per target, answers matched by id."""

    def __init__(self, name: str = "farmctl", connect_timeout: float = 1.0, observer=None):
        self.name = name
        self.connect_timeout = connect_timeout
        self.socks: dict[tuple[str, int], socket.socket] = {}
        self.buffers: dict[tuple[str, int], bytearray] = {}
        self.observer = observer
        self.sent: list[Message] = []

    @property
    def address(self) -> Address:
        return Address(module=self.name)

    def _sock(self, host: str, port: int) -> socket.socket:
        key = (host, int(port))
        sock = self.socks.get(key)
        if sock is None:
            try:
                sock = socket.create_connection(key, timeout=self.connect_timeout)
            except OSError as exc:
                raise RemoteUnreachable(f"cannot connect to {host}:{port}: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.socks[key] = sock
            self.buffers[key] = bytearray()
        return sock

    def send(self, dest: Address, verb: str, body: dict | None = None) -> Message:
        if dest.host is None:
            raise ValueError(f"client needs a host:port destination, got {dest}")
        msg = Message(verb, dest, self.address, dict(body or {}))
        sock = self._sock(dest.host, dest.port)
        try:
            sock.sendall(encode_message(msg))
        except OSError as exc:
            self._close((dest.host, dest.port))
            raise RemoteUnreachable(f"send to {dest.host}:{dest.port} failed: {exc}") from exc
        self.sent.append(msg)
        if self.observer:
            self.observer(msg)
        return msg

    def _read(self, key, timeout: float) -> list[Message]:
        sock = self.socks.get(key)
        if sock is None:
            raise RemoteUnreachable(f"connection to {key[0]}:{key[1]} is closed")
        sock.settimeout(max(timeout, 0.001))
        try:
            data = sock.recv(1 << 18)
        except socket.timeout:
            return []
        except OSError as exc:
            self._close(key)
            raise RemoteUnreachable(f"connection to {key[0]}:{key[1]} failed: {exc}") from exc
        if not data:
            self._close(key)
            raise RemoteUnreachable(f"connection to {key[0]}:{key[1]} closed by peer")
        buf = self.buffers[key]
        buf += data
        errors: list[MalformedFrame] = []
        msgs, rest = decode_stream(bytes(buf), errors.append)
        self.buffers[key] = bytearray(rest)
        return msgs

    def collect(self, query: Message, timeout: float = 5.0, quiet: float | None = None) -> list[Message]:
        """Answers to ``query``: the first one, or all until ``quiet`` seconds pass without more."""
        key = (query.destination.host, query.destination.port)
        answers: list[Message] = []
        deadline = time.monotonic() + timeout
        quiet_until = None
        while True:
            now = time.monotonic()
            limit = deadline if quiet_until is None else min(deadline, quiet_until)
            if now >= limit:
                break
            for m in self._read(key, limit - now):
                if m.correlation_id == query.id:
                    answers.append(m)
                    if quiet is None:
                        return answers
                    quiet_until = time.monotonic() + quiet
        if not answers:
            raise ClientTimeout(f"no answer to {query.verb} from {key[0]}:{key[1]} within {timeout}s")
        return answers

    def request(self, dest: Address, verb: str, body: dict | None = None, timeout: float = 5.0,
                quiet: float | None = None) -> Message | list[Message]:
        q = self.send(dest, verb, body)
        answers = self.collect(q, timeout, quiet)
        return answers if quiet is not None else answers[0]

    def _close(self, key):
        sock = self.socks.pop(key, None)
        self.buffers.pop(key, None)
        if sock is not None:
            sock.close()

    def close(self):
        for key in list(self.socks):
            self._close(key)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def request(dest: Address | str, verb: str, body: dict | None = None, timeout: float = 5.0) -> Message:
    """One-shot helper: connect, ask, return the first answer, disconnect."""
    if isinstance(dest, str):
        dest = Address.parse(dest)
    with Client() as c:
        return c.request(dest, verb, body, timeout)


__all__ = ["Client", "ClientTimeout", "request"]
