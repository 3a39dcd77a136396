"""Synthetic XTC files standing in for staged detector data."""
from __future__ import annotations

import os
import random


class StagingError(Exception):
    kind = "StagingError"


class AlreadyStaged(StagingError):
    kind = "AlreadyStaged"


class StagingAreaFull(StagingError):
    kind = "StagingAreaFull"


def xtc_name(run_id: int) -> str:
    return f"run{int(run_id):06d}.xtc"


def stage_xtc(run_id: int, staging_area: str, events_total: int, quota: int | None = None) -> str:
    """Write the run's synthetic XTC file (deterministic in ``run_id``)."""
    os.makedirs(staging_area, exist_ok=True)
    path = os.path.join(staging_area, xtc_name(run_id))
    if os.path.exists(path):
        raise AlreadyStaged(f"run {run_id} is already staged at {path}")
    if quota is not None:
        present = [f for f in os.listdir(staging_area) if f.endswith(".xtc")]
        if len(present) >= quota:
            raise StagingAreaFull(f"staging area holds {len(present)} of {quota} files")
    rng = random.Random(int(run_id))
    tmp = path + ".part"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(f"XTC run={int(run_id)} events={int(events_total)}\n")
        for seq in range(int(events_total)):
            fh.write(f"EVT {seq} {rng.getrandbits(64):016x}\n")
    os.replace(tmp, path)
    return path


def read_header(path: str) -> tuple[int, int]:
    """(run_id, events) from the first line; ValueError when malformed."""
    with open(path, encoding="ascii") as fh:
        head = fh.readline().split()
    if len(head) != 3 or head[0] != "XTC":
        raise ValueError(f"{path}: not an XTC file")
    fields = dict(part.split("=", 1) for part in head[1:])
    return int(fields["run"]), int(fields["events"])


def read_events(path: str) -> list[str]:
    with open(path, encoding="ascii") as fh:
        fh.readline()
        return [line.rstrip("\n") for line in fh if line.startswith("EVT ")]
