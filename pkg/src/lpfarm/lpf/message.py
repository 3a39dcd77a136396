"""Message envelope and addressing shared by every LPF component."""
from __future__ import annotations

import itertools
import os
import uuid
from dataclasses import dataclass, field, replace
from typing import Any

LOCAL = "LOCAL"
MAX_HOPS = 16


class _IdSource:
    """Session-unique message ids: a random per-process prefix plus a counter."""

    def __init__(self):
        self.reseed()

    def reseed(self):
        self.prefix = uuid.uuid4().hex[:12]
        self.counter = itertools.count(1)

    def __call__(self) -> str:
        return f"{self.prefix}-{next(self.counter)}"


new_id = _IdSource()
# A forked child must never reuse the parent's id sequence.
os.register_at_fork(after_in_child=new_id.reseed)


@dataclass(frozen=True)
class Address:
    module: str
    domain: str = LOCAL
    service: str | None = None
    host: str | None = None
    port: int | None = None

    def __post_init__(self):
        if not self.module:
            raise ValueError("address needs a module name")
        if (self.host is None) != (self.port is None):
            raise ValueError("host and port must be given together")
        if self.domain != LOCAL and self.service is None and self.host is None:
            raise ValueError(f"non-local address to {self.module!r} needs a service or a host/port")

    @property
    def location(self) -> tuple[str, int] | None:
        if self.host is None:
            return None
        return (self.host, self.port)

    def at(self, host: str, port: int) -> Address:
        return replace(self, host=host, port=port)

    def to_dict(self) -> dict[str, Any]:
        return {
            "module": self.module,
            "domain": self.domain,
            "service": self.service,
            "host": self.host,
            "port": self.port,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Address:
        return cls(
            module=d["module"],
            domain=d.get("domain", LOCAL),
            service=d.get("service"),
            host=d.get("host"),
            port=d.get("port"),
        )

    @classmethod
    def parse(cls, text: str, domain: str = LOCAL) -> Address:
        """Parse ``host:port/module`` (or a bare module name for a local address)."""
        if "/" not in text:
            return cls(module=text)
        loc, module = text.split("/", 1)
        host, _, port = loc.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad address {text!r}, expected host:port/module")
        return cls(module=module, domain=domain, host=host, port=int(port))

    def __str__(self):
        where = f"{self.host}:{self.port}" if self.host else self.domain
        svc = f" svc={self.service}" if self.service else ""
        return f"{self.module}@{where}{svc}"


@dataclass
class Message:
    verb: str
    destination: Address
    source: Address
    body: dict[str, Any] = field(default_factory=dict)
    id: str = field(default_factory=new_id)
    correlation_id: str | None = None
    hop_count: int = 0

    def reply(self, verb: str, body: dict[str, Any] | None = None) -> Message:
        """Build the answer to this message, routed back to its source."""
        return Message(
            verb=verb,
            destination=self.source,
            source=self.destination,
            body=body or {},
            correlation_id=self.id,
        )

    def copy(self, **changes) -> Message:
        return replace(self, **changes)

    @property
    def is_answer(self) -> bool:
        return self.correlation_id is not None

    def __repr__(self):
        corr = f" re={self.correlation_id}" if self.correlation_id else ""
        return f"<Message {self.verb} {self.source} -> {self.destination} id={self.id}{corr} hops={self.hop_count}>"


def error_reply(msg: Message, error: str, text: str = "", **extra) -> Message:
    body = {"error": error, "text": text}
    body.update(extra)
    return msg.reply("Error", body)
