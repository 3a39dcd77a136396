from __future__ import annotations

import time


class WallClock:
    def now(self) -> float:
        return time.time()


class SimClock:
    """Manually advanced clock for deterministic scheduling tests."""

    def __init__(self, start: float = 1_000_000_000.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("time only moves forward")
        self._now += seconds
        return self._now

    def set(self, t: float):
        if t < self._now:
            raise ValueError("time only moves forward")
        self._now = t
