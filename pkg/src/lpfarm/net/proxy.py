"""Transparent proxy: a local stand-in module for a service hosted elsewhere."""
from __future__ import annotations

from ..lpf import registry
from ..lpf.core import Module
from ..lpf.errors import NamingUnavailable, RemoteUnreachable
from ..lpf.message import Address, Message


@registry.module_type("Proxy")
class Proxy(Module):
    """Looks like the real service to local callers.

    Every message it receives is re-addressed to the resolved (host, port)
    and sent directly; answers come back on the same connection and are
    routed to the caller by correlation id. If sending fails the service is
    looked up once more (it may have moved) before giving up.
    """

    def init(self, config):
        self.service = config["service"]
        self.domain = config.get("domain", "default")
        self.resolved = (config["host"], int(config["port"]))
        self.sent = 0
        self.failures = 0

    def target(self, msg: Message) -> Address:
        d = msg.destination
        return Address(module=self.service, domain=self.domain, service=d.service,
                       host=self.resolved[0], port=self.resolved[1])

    def _send(self, msg: Message):
        fwd = self.lpf.outbound(msg, self.target(msg))
        key, _ = self.lpf.net.send(fwd)
        self.lpf.track_link(msg.id, key)
        self.sent += 1

    def do(self, msg):
        try:
            self._send(msg)
        except RemoteUnreachable as first:
            self.spawn(self._retry(msg, str(first)), f"proxy:{self.service}:retry")
        return None

    def _retry(self, msg, cause):
        from ..lpf.activator import lookup
        try:
            where = yield from lookup(self.lpf, self.domain, self.service)
        except NamingUnavailable as exc:
            where, cause = None, f"{cause}; re-resolution failed: {exc}"
        if where is not None and where != self.resolved:
            self.resolved = where
            try:
                self._send(msg)
                return
            except RemoteUnreachable as exc:
                cause = str(exc)
        self.failures += 1
        self.lpf.alarm("ERROR", f"RemoteUnreachable: service {self.service}@{self.domain}: {cause}",
                       module=self.name)
        if msg.id in self.lpf._waiters:
            self.lpf._notify_undeliverable(msg, f"RemoteUnreachable: {cause}")
