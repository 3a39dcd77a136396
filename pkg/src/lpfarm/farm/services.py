"""Upper- and lower-layer farm services: bookkeeping, staging, scheduling."""
from __future__ import annotations

import os

from ..lpf import registry
from ..lpf.core import Module
from ..lpf.message import error_reply
from .bookkeeping import BookkeepingStore, StoreCorrupt
from .records import ER, PASSES, PC, STAGED, RecordError, RunRecord, retry_allowed, schedule_next
from .staging import StagingError, stage_xtc


class _StoreUser(Module):
    """Opens the shared store named by the ``store`` config key."""

    def init(self, config):
        self.config = config
        self.store_error = None
        try:
            self.store = BookkeepingStore(os.path.expanduser(str(config.get("store", "bookkeeping"))))
        except StoreCorrupt as exc:
            self.store = exc.store
            self.store_error = str(exc)
            self.lpf.alarm("ERROR", f"bookkeeping store corrupt: {exc}", module=self.name)


@registry.module_type("Bookkeeping")
class Bookkeeping(_StoreUser):
    """Interface service to the bookkeeping store (one per layer)."""

    def do(self, msg):
        b = msg.body
        try:
            if msg.verb == "BkGet":
                rec = self.store.get(int(b["run_id"]), str(b["pass"]))
                if rec is None:
                    return [error_reply(msg, "NotFound", f"no record for run {b['run_id']} {b['pass']}")]
                return [msg.reply("BkRecord", {"record": rec.to_dict()})]
            if msg.verb == "BkPut":
                rec = self.store.append(RunRecord.from_dict(b["record"]))
                return [msg.reply("BkStored", {"record": rec.to_dict(), "entries": self.store.entries})]
            if msg.verb == "BkCatalog":
                recs = self.store.catalog(b.get("pass"))
                return [msg.reply("BkCatalogAnswer", {"records": [r.to_dict() for r in recs]})]
            if msg.verb == "BkHistory":
                return [msg.reply("BkHistoryAnswer", {"records": [r.to_dict() for r in self.store.history()]})]
        except StoreCorrupt as exc:
            self.lpf.alarm("ERROR", f"bookkeeping refused: {exc}", module=self.name)
            return [error_reply(msg, exc.kind, str(exc))]
        except RecordError as exc:
            return [error_reply(msg, exc.kind, str(exc))]
        except (KeyError, TypeError, ValueError) as exc:
            return [error_reply(msg, "BadRequest", str(exc))]
        if msg.is_answer:
            return None
        return [error_reply(msg, "UnknownVerb", msg.verb)]


@registry.module_type("Stager")
class Stager(_StoreUser):
    """Stages runs to disk and enters them in the catalog for both passes."""

    def do(self, msg):
        b = msg.body
        if msg.verb == "StageRun":
            try:
                run_id, events = int(b["run_id"]), int(b["events"])
                area = os.path.expanduser(str(self.config.get("staging_area", "staging")))
                quota = self.config.get("quota")
                path = stage_xtc(run_id, area, events, int(quota) if quota else None)
                for p in PASSES:
                    self.store.append(RunRecord(run_id, p, STAGED, path, calibrated=False, events_total=events))
            except (StagingError, StoreCorrupt, RecordError) as exc:
                return [error_reply(msg, exc.kind, str(exc))]
            except (KeyError, TypeError, ValueError) as exc:
                return [error_reply(msg, "BadRequest", str(exc))]
            return [msg.reply("Staged", {"run_id": run_id, "xtc_path": path, "events": events})]
        if msg.is_answer:
            return None
        return [error_reply(msg, "UnknownVerb", msg.verb)]


@registry.module_type("Scheduler")
class Scheduler(_StoreUser):
    """Applies the pass rules to the catalog."""

    def do(self, msg):
        b = msg.body
        try:
            if msg.verb == "NextRun":
                p = str(b["pass"])
                return [msg.reply("NextRunAnswer", {"pass": p, "run_id": schedule_next(self.store.catalog(p), p)})]
            if msg.verb == "CheckRun":
                p, run_id = str(b["pass"]), int(b["run_id"])
                cat = self.store.catalog(p)
                ok = schedule_next(cat, p) == run_id or retry_allowed(cat, p, run_id)
                if not ok and b.get("rerun"):
                    rec = next((r for r in cat if r.run_id == run_id), None)
                    ok = rec is not None and rec.status == "DONE" and (p == PC or rec.calibrated)
                return [msg.reply("RunEligibility", {"pass": p, "run_id": run_id, "eligible": ok})]
        except RecordError as exc:
            return [error_reply(msg, exc.kind, str(exc))]
        except (KeyError, TypeError, ValueError) as exc:
            return [error_reply(msg, "BadRequest", str(exc))]
        if msg.is_answer:
            return None
        return [error_reply(msg, "UnknownVerb", msg.verb)]


__all__ = ["Bookkeeping", "Stager", "Scheduler", "PC", "ER"]
