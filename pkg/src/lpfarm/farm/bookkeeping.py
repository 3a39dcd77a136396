"""File-based bookkeeping: a checksummed append-only journal plus a snapshot."""
from __future__ import annotations

import fcntl
import json
import os
import zlib

from .records import RunRecord

JOURNAL = "journal.log"
SNAPSHOT = "snapshot.json"


class StoreCorrupt(Exception):
    kind = "StoreCorrupt"

    def __init__(self, message, store=None):
        super().__init__(message)
        self.store = store


def _line(record: RunRecord) -> str:
    body = json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":"))
    return f"{zlib.crc32(body.encode()):08x} {body}\n"


class BookkeepingStore:
    """Shared by several processes: appends take an exclusive file lock.

    Loading stops at the first bad journal line; records before it stay
    readable but the store refuses further writes until repaired.
    """

    def __init__(self, path: str):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.journal_path = os.path.join(path, JOURNAL)
        self.snapshot_path = os.path.join(path, SNAPSHOT)
        self.records: dict[str, RunRecord] = {}
        self.entries = 0
        self.corrupt: str | None = None
        self._offset = 0
        open(self.journal_path, "a").close()
        self.refresh()

    def refresh(self):
        """Read journal lines appended since the last look (by anyone).

        Raises StoreCorrupt the first time a bad entry is met; afterwards
        reads serve the valid prefix and writes are refused.
        """
        if self.corrupt:
            return
        with open(self.journal_path, "rb") as fh:
            fcntl.flock(fh, fcntl.LOCK_SH)  # never see a half-written line
            try:
                self._scan(fh)
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _scan(self, fh):
        fh.seek(self._offset)
        data = fh.read()
        pos = 0
        while pos < len(data):
            end = data.find(b"\n", pos)
            if end < 0:
                self._offset += pos
                self.corrupt = f"truncated journal entry at byte {self._offset}"
                raise StoreCorrupt(self.corrupt, self)
            raw = data[pos:end].decode("utf-8", "replace")
            try:
                crc, body = raw.split(" ", 1)
                if int(crc, 16) != zlib.crc32(body.encode()):
                    raise ValueError("checksum mismatch")
                rec = RunRecord.from_dict(json.loads(body))
            except (ValueError, TypeError) as exc:
                self._offset += pos
                self.corrupt = f"bad journal entry {self.entries + 1}: {exc}"
                raise StoreCorrupt(self.corrupt, self) from None
            self.records[rec.key] = rec
            self.entries += 1
            pos = end + 1
        self._offset += pos

    @classmethod
    def open(cls, path: str) -> BookkeepingStore:
        return cls(path)

    def append(self, record: RunRecord) -> RunRecord:
        if self.corrupt:
            raise StoreCorrupt(f"refusing to write: {self.corrupt}", self)
        record.check()
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                with open(self.journal_path, "rb") as rd:
                    self._scan(rd)
                fh.write(_line(record))
                fh.flush()
                os.fsync(fh.fileno())
                with open(self.journal_path, "rb") as rd:
                    self._scan(rd)
                self._write_snapshot()
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        return self.records[record.key]

    def _write_snapshot(self):
        tmp = f"{self.snapshot_path}.{os.getpid()}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({k: r.to_dict() for k, r in sorted(self.records.items())}, fh, indent=1, sort_keys=True)
        os.replace(tmp, self.snapshot_path)

    def get(self, run_id: int, pass_type: str) -> RunRecord | None:
        self.refresh()
        rec = self.records.get(f"{int(run_id)}/{pass_type}")
        return RunRecord.from_dict(rec.to_dict()) if rec else None

    def catalog(self, pass_type: str | None = None) -> list[RunRecord]:
        self.refresh()
        return sorted((RunRecord.from_dict(r.to_dict()) for r in self.records.values()
                       if pass_type is None or r.pass_type == pass_type),
                      key=lambda r: (r.run_id, r.pass_type))

    def history(self) -> list[RunRecord]:
        """Every journal entry in order (the snapshot only keeps the latest)."""
        out = []
        with open(self.journal_path, encoding="utf-8") as fh:
            for n, raw in enumerate(fh):
                if n >= self.entries:
                    break
                out.append(RunRecord.from_dict(json.loads(raw.rstrip("\n").split(" ", 1)[1])))
        return out

    def snapshot(self) -> dict:
        with open(self.snapshot_path, encoding="utf-8") as fh:
            return json.load(fh)
