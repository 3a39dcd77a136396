"""Naming replica: stores records and converges with its peers by pulling dumps."""
from __future__ import annotations

from ..lpf import registry
from ..lpf.core import Module
from ..lpf.message import Address, Message, error_reply
from ..lpf.tasks import WaitAll
from .records import ServiceRecord, newer

SYNC_PERIOD = 5.0


@registry.module_type("NsReplica")
class NsReplica(Module):
    """One copy of the naming registry.

    Verbs: ``NsGet`` {domain, name}, ``NsPut`` {record}, ``NsDump``,
    ``NsSync`` (pull from peers), ``NsStats``. Deleted names are kept as
    tombstones so that anti-entropy cannot resurrect them.
    """

    def init(self, config):
        self.records: dict[tuple[str, str], ServiceRecord] = {}
        self.lookups = 0
        self.syncs = 0
        peers = config.get("peers", [])
        if isinstance(peers, str):
            peers = [p for p in peers.split(",") if p.strip()]
        self.peers = [Address.parse(p.strip()) for p in peers]
        period = float(config.get("sync_period_s", SYNC_PERIOD))
        self.cron_id = None
        if self.peers and period > 0:
            tick = Message("NsSync", Address(module=self.name), Address(module=self.name))
            self.cron_id = self.lpf.schedule_cron(period, tick)

    def kill(self):
        if self.cron_id:
            self.lpf.cancel_cron(self.cron_id)

    def get(self, domain, name) -> ServiceRecord | None:
        return self.records.get((domain, name))

    def put(self, rec: ServiceRecord) -> bool:
        if newer(self.records.get(rec.key), rec):
            self.records[rec.key] = rec
            return True
        return False

    def live_records(self) -> dict[tuple[str, str], ServiceRecord]:
        return {k: r for k, r in self.records.items() if r.live}

    def do(self, msg):
        verb, body = msg.verb, msg.body
        if verb == "NsGet":
            self.lookups += 1
            rec = self.get(body.get("domain"), body.get("name"))
            return [msg.reply("NsRecord", {"record": rec.to_dict() if rec else None})]
        if verb == "NsPut":
            try:
                rec = ServiceRecord.from_dict(body["record"])
            except (KeyError, TypeError, ValueError) as exc:
                return [error_reply(msg, "BadRecord", str(exc))]
            applied = self.put(rec)
            return [msg.reply("NsPutAck", {"applied": applied, "generation": self.records[rec.key].generation})]
        if verb == "NsDump":
            return [msg.reply("NsDumpAnswer", {"records": [r.to_dict() for r in self.records.values()]})]
        if verb == "NsSync":
            self.spawn(self._sync(msg), f"{self.name}.sync")
            return None
        if verb == "NsStats":
            return [msg.reply("NsStatsAnswer", {"lookups": self.lookups, "records": len(self.live_records()),
                                                "syncs": self.syncs})]
        if msg.is_answer:
            return None
        return [error_reply(msg, "UnknownVerb", verb)]

    def _sync(self, trigger: Message):
        asks = [Message("NsDump", p, self.address) for p in self.peers]
        answers = yield WaitAll(asks, timeout=float(self.config.get("sync_timeout_s", 1.0)))
        merged = reached = 0
        for ans in answers:
            if ans is None or ans.verb != "NsDumpAnswer":
                continue
            reached += 1
            for d in ans.body["records"]:
                merged += self.put(ServiceRecord.from_dict(d))
        self.syncs += 1
        if trigger.source.module != self.name or trigger.source.host is not None:
            self.lpf.post(trigger.reply("NsSynced", {"merged": merged, "peers_reached": reached}))
