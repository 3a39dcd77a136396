"""Blocking frame helpers shared by the mock Logging Manager and mock Elf."""
from __future__ import annotations

import socket

from ..lpf.message import Address, Message
from ..net.wire import HEADER, decode_payload, encode_message

CHUNK = 500


def send(sock: socket.socket, verb: str, body: dict, sender: str, reply_to: Message | None = None):
    if reply_to is not None:
        m = reply_to.reply(verb, body)
    else:
        m = Message(verb, Address("LoggingManager"), Address(sender), body)
    sock.sendall(encode_message(m))


def _exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            return None
        buf += part
    return buf


def recv(sock: socket.socket) -> Message | None:
    head = _exact(sock, HEADER.size)
    if head is None:
        return None
    (size,) = HEADER.unpack(head)
    payload = _exact(sock, size)
    if payload is None:
        return None
    return decode_payload(payload)


def split_ranges(total: int, nodes: list[str]) -> dict[str, tuple[int, int]]:
    """Contiguous (first, count) per node; earlier nodes get the remainder."""
    k = len(nodes)
    base, extra = divmod(total, k) if k else (0, 0)
    out, first = {}, 0
    for i, n in enumerate(nodes):
        count = base + (1 if i < extra else 0)
        out[n] = (first, count)
        first += count
    return out
