"""Run records and the two scheduling rules (sequential PC, calibrated ER)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

PC, ER = "PC", "ER"
PASSES = (PC, ER)
PENDING, STAGED, PROCESSING, DONE, FAILED = "PENDING", "STAGED", "PROCESSING", "DONE", "FAILED"
STATUSES = (PENDING, STAGED, PROCESSING, DONE, FAILED)


class RecordError(ValueError):
    kind = "InvalidRecord"


@dataclass
class RunRecord:
    run_id: int
    pass_type: str
    status: str = PENDING
    xtc_path: str = ""
    calibrated: bool = False
    events_total: int = 0
    events_processed: int = 0
    log_dir: str = ""
    cause: str = ""
    nodes: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        return f"{self.run_id}/{self.pass_type}"

    def check(self):
        """Raise RecordError when an invariant is broken."""
        if not isinstance(self.run_id, int) or self.run_id <= 0:
            raise RecordError(f"run_id must be a positive integer, not {self.run_id!r}")
        if self.pass_type not in PASSES:
            raise RecordError(f"pass must be one of {PASSES}, not {self.pass_type!r}")
        if self.status not in STATUSES:
            raise RecordError(f"unknown status {self.status!r}")
        if self.events_processed > self.events_total:
            raise RecordError(f"run {self.run_id}: processed {self.events_processed} > total {self.events_total}")
        if self.status == DONE and self.events_processed != self.events_total:
            raise RecordError(f"run {self.run_id}: DONE needs all {self.events_total} events processed")
        if self.pass_type == ER and self.status in (PROCESSING, DONE) and not self.calibrated:
            raise RecordError(f"run {self.run_id}: ER processing requires calibration")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def schedule_next(catalog: Iterable[RunRecord], pass_type: str) -> int | None:
    """The next run this pass may start, or None.

    PC: the lowest run not yet DONE, provided it is STAGED (every earlier
    run is then DONE). ER: the lowest STAGED run that is calibrated.
    """
    runs = sorted((r for r in catalog if r.pass_type == pass_type), key=lambda r: r.run_id)
    if pass_type == PC:
        for r in runs:
            if r.status == DONE:
                continue
            return r.run_id if r.status == STAGED else None
        return None
    if pass_type == ER:
        for r in runs:
            if r.status == STAGED and r.calibrated:
                return r.run_id
        return None
    raise RecordError(f"unknown pass {pass_type!r}")


def retry_allowed(catalog: Iterable[RunRecord], pass_type: str, run_id: int) -> bool:
    """An operator may rerun a FAILED run when the scheduling rule would allow it."""
    runs = {r.run_id: r for r in catalog if r.pass_type == pass_type}
    r = runs.get(run_id)
    if r is None or r.status != FAILED:
        return False
    if pass_type == PC:
        return all(o.status == DONE for k, o in runs.items() if k < run_id)
    return r.calibrated
