"""Length-prefixed frame codec for inter-LPF messages.

A frame is a 4-byte big-endian unsigned payload length followed by the
UTF-8 JSON encoding of one message. Field order is fixed so encoding is
deterministic::

    {"id":..,"correlation_id":..,"source":{..},"destination":{..},
     "verb":..,"body":{..},"hop_count":..}
"""
from __future__ import annotations

import json
import struct
from typing import Callable

from ..lpf.message import Address, Message

HEADER = struct.Struct(">I")
MAX_PAYLOAD = 1 << 20

_FIELDS = ("id", "correlation_id", "source", "destination", "verb", "body", "hop_count")


class WireError(Exception):
    pass


class OversizeMessage(WireError):
    pass


class MalformedFrame(WireError):
    def __init__(self, text, fatal=False):
        super().__init__(text)
        # A bad length prefix loses framing; nothing after it can be trusted.
        self.fatal = fatal


def _payload(m: Message) -> bytes:
    doc = {
        "id": m.id,
        "correlation_id": m.correlation_id,
        "source": m.source.to_dict(),
        "destination": m.destination.to_dict(),
        "verb": m.verb,
        "body": m.body,
        "hop_count": m.hop_count,
    }
    try:
        text = json.dumps(doc, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise WireError(f"message body is not encodable: {exc}") from exc
    return text.encode("utf-8")


def encode_message(m: Message) -> bytes:
    if not m.verb:
        raise WireError("message has no verb")
    payload = _payload(m)
    if len(payload) > MAX_PAYLOAD:
        raise OversizeMessage(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Message:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedFrame(f"unparseable payload: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != set(_FIELDS):
        raise MalformedFrame("payload does not carry exactly the message fields")
    try:
        if not isinstance(doc["verb"], str) or not doc["verb"]:
            raise ValueError("verb")
        if not isinstance(doc["body"], dict):
            raise ValueError("body")
        hops = doc["hop_count"]
        if not isinstance(hops, int) or isinstance(hops, bool) or hops < 0:
            raise ValueError("hop_count")
        if not isinstance(doc["id"], str):
            raise ValueError("id")
        if doc["correlation_id"] is not None and not isinstance(doc["correlation_id"], str):
            raise ValueError("correlation_id")
        return Message(
            verb=doc["verb"],
            destination=Address.from_dict(doc["destination"]),
            source=Address.from_dict(doc["source"]),
            body=doc["body"],
            id=doc["id"],
            correlation_id=doc["correlation_id"],
            hop_count=hops,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFrame(f"invalid message field: {exc}") from exc


def decode_stream(
    buffer: bytes, on_error: Callable[[MalformedFrame], None] | None = None
) -> tuple[list[Message], bytes]:
    """Split ``buffer`` into complete messages and an unconsumed remainder.

    A frame whose payload cannot be decoded is skipped (reported through
    ``on_error``) and decoding continues with the next frame. A length
    prefix above the frame limit destroys framing: the rest of the buffer
    is discarded and reported as one fatal error.
    """
    messages = []
    view = memoryview(buffer)
    pos = 0
    while len(view) - pos >= HEADER.size:
        (length,) = HEADER.unpack_from(view, pos)
        if length > MAX_PAYLOAD:
            if on_error:
                on_error(MalformedFrame(f"frame length {length} over limit", fatal=True))
            return messages, b""
        end = pos + HEADER.size + length
        if end > len(view):
            break
        try:
            messages.append(decode_payload(bytes(view[pos + HEADER.size:end])))
        except MalformedFrame as exc:
            if on_error:
                on_error(exc)
        pos = end
    return messages, bytes(view[pos:])
