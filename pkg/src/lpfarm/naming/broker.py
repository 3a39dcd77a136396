"""Naming broker: replication and load balancing in front of the replicas.

The broker keeps no registry data. Its only state is the replica list, the
round-robin cursor and the transactions currently in flight, so it can be
restarted at any moment.
"""
from __future__ import annotations

from ..lpf import registry
from ..lpf.core import Module
from ..lpf.message import Address, Message, error_reply
from ..lpf.tasks import Wait, WaitAll
from .records import ServiceRecord

REPLICA_TIMEOUT = 1.0


@registry.module_type("NsBroker")
class NsBroker(Module):
    """Verbs: ``NsRegister`` {domain, name, location}, ``NsLookup`` {domain, name},
    ``NsUnregister`` {domain, name[, location]}, ``NsServers``."""

    def init(self, config):
        reps = config.get("replicas", [])
        if isinstance(reps, str):
            reps = [r for r in reps.split(",") if r.strip()]
        if not reps:
            raise ValueError("broker needs at least one replica")
        self.server_list = [Address.parse(r.strip()) for r in reps]
        self.timeout = float(config.get("replica_timeout_s", REPLICA_TIMEOUT))
        self.cursor = 0
        self.in_flight: dict[str, dict] = {}

    def snapshot(self) -> dict:
        return {
            "server_list": [str(a) for a in self.server_list],
            "cursor": self.cursor,
            "in_flight": [dict(t) for t in self.in_flight.values()],
        }

    def do(self, msg):
        body = msg.body
        if msg.is_answer:
            return None
        if msg.verb in ("NsRegister", "NsLookup", "NsUnregister"):
            if not body.get("domain") or not body.get("name"):
                return [error_reply(msg, "BadRequest", "domain and name are required")]
            if msg.verb == "NsRegister":
                loc = body.get("location")
                if not (isinstance(loc, list) and len(loc) == 2):
                    return [error_reply(msg, "BadRequest", "location must be [host, port]")]
            handler = {"NsRegister": self._register, "NsLookup": self._lookup,
                       "NsUnregister": self._unregister}[msg.verb]
            self.in_flight[msg.id] = {"verb": msg.verb, "domain": body["domain"], "name": body["name"]}
            task = self.spawn(handler(msg), f"{self.name}.{msg.verb}")
            task.add_done_callback(lambda t, mid=msg.id: self._done(mid, msg, t))
            return None
        if msg.verb == "NsServers":
            return [msg.reply("NsServersAnswer", self.snapshot())]
        return [error_reply(msg, "UnknownVerb", msg.verb)]

    def _done(self, mid, msg, task):
        self.in_flight.pop(mid, None)
        if task.error is not None:
            self.lpf.post(error_reply(msg, "BrokerFault", repr(task.error)))

    def _ask_all(self, verb, body):
        asks = [Message(verb, r, self.address, dict(body)) for r in self.server_list]
        answers = yield WaitAll(asks, timeout=self.timeout)
        return [a if a is not None and a.verb != "Undeliverable" and a.verb != "Error" else None
                for a in answers]

    def _current(self, domain, name):
        """Newest record across reachable replicas, and how many answered."""
        answers = yield from self._ask_all("NsGet", {"domain": domain, "name": name})
        best, reached = None, 0
        for a in answers:
            if a is None:
                continue
            reached += 1
            d = a.body.get("record")
            if d:
                rec = ServiceRecord.from_dict(d)
                if best is None or rec.rank() > best.rank():
                    best = rec
        return best, reached

    def _write(self, rec: ServiceRecord):
        answers = yield from self._ask_all("NsPut", {"record": rec.to_dict()})
        return sum(1 for a in answers if a is not None)

    def _register(self, msg):
        domain, name = msg.body["domain"], msg.body["name"]
        location = (msg.body["location"][0], int(msg.body["location"][1]))
        best, reached = yield from self._current(domain, name)
        if reached == 0:
            self.lpf.post(error_reply(msg, "AllReplicasDown", f"no replica answered for {name}@{domain}"))
            return
        if best is not None and best.live and best.location == location:
            # Same binding again (e.g. a retried registration): repair, don't bump.
            rec = best
        else:
            gen = (best.generation if best else 0) + 1
            rec = ServiceRecord(name, domain, location, self.lpf.clock.now(), gen)
        written = yield from self._write(rec)
        if written == 0:
            self.lpf.post(error_reply(msg, "AllReplicasDown", f"no replica accepted {name}@{domain}"))
            return
        self.lpf.post(msg.reply("NsRegistered", {"replicas": written, "generation": rec.generation,
                                                 "name": name, "domain": domain}))

    def _lookup(self, msg):
        domain, name = msg.body["domain"], msg.body["name"]
        n = len(self.server_list)
        start = self.cursor
        self.cursor = (self.cursor + 1) % n
        for i in range(n):
            replica = self.server_list[(start + i) % n]
            ans = yield Wait(Message("NsGet", replica, self.address, {"domain": domain, "name": name}),
                             self.timeout)
            if ans is None or ans.verb != "NsRecord":
                continue
            d = ans.body.get("record")
            rec = ServiceRecord.from_dict(d) if d else None
            if rec is None or not rec.live:
                self.lpf.post(error_reply(msg, "NotFound", f"{name} not registered in domain {domain}"))
            else:
                self.lpf.post(msg.reply("NsLocation", {"name": name, "domain": domain,
                                                       "location": list(rec.location),
                                                       "generation": rec.generation}))
            return
        self.lpf.post(error_reply(msg, "AllReplicasDown", f"no replica answered lookup of {name}@{domain}"))

    def _unregister(self, msg):
        domain, name = msg.body["domain"], msg.body["name"]
        guard = msg.body.get("location")
        best, reached = yield from self._current(domain, name)
        if reached == 0:
            self.lpf.post(error_reply(msg, "AllReplicasDown", f"no replica answered for {name}@{domain}"))
            return
        if best is None or not best.live:
            self.lpf.post(msg.reply("NsUnregistered", {"replicas": reached, "removed": False}))
            return
        if guard and best.location != (guard[0], int(guard[1])):
            self.lpf.post(msg.reply("NsUnregistered", {"replicas": reached, "removed": False,
                                                       "text": "bound to another location"}))
            return
        tomb = ServiceRecord(name, domain, None, self.lpf.clock.now(), best.generation + 1, deleted=True)
        written = yield from self._write(tomb)
        if written == 0:
            self.lpf.post(error_reply(msg, "AllReplicasDown", f"no replica accepted removal of {name}"))
            return
        self.lpf.post(msg.reply("NsUnregistered", {"replicas": written, "removed": True}))
