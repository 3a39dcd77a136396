"""Read-only farm monitor: polls FarmManagers and their RunProcessing FSMs."""
from __future__ import annotations

import sys
import threading
import time
from dataclasses import dataclass, field

from ..lpf.errors import RemoteUnreachable
from ..lpf.message import Address
from ..net.client import Client, ClientTimeout
from . import render


@dataclass
class FarmTarget:
    fm: Address

    @property
    def rp(self) -> Address:
        # the configuration keeps RunProcessing next to its FarmManager
        return Address("RunProcessing", host=self.fm.host, port=self.fm.port)

    @property
    def lpf(self) -> Address:
        return Address("Lpf", host=self.fm.host, port=self.fm.port)


@dataclass
class FarmView:
    target: FarmTarget
    status: dict | None = None
    rp: dict | None = None
    alarms: list = field(default_factory=list)
    error: str = ""
    histories: dict = field(default_factory=dict)  # RP instance id -> latest history seen
    sequences: dict = field(default_factory=dict)  # RP instance id -> current states in the order seen
    runs: dict = field(default_factory=dict)  # RP instance id -> (pass, run id)


class Monitor:
    """Sends nothing but FarmStatus, FsmQuery and Alarms; a dead farm is shown, never fatal."""

    def __init__(self, targets, client: Client | None = None, out=None, refresh_s: float = 1.0,
                 timeout: float = 2.0, tail: int = 5):
        self.views = [FarmView(t) for t in targets]
        self.client = client or Client("farmctl-monitor")
        self.out = out or sys.stdout
        self.refresh_s = refresh_s
        self.timeout = timeout
        self.tail = tail
        self.polls = 0
        self._stop = threading.Event()

    def stop(self):
        self._stop.set()

    def _ask(self, dest, verb):
        try:
            ans = self.client.request(dest, verb, timeout=self.timeout)
        except (RemoteUnreachable, ClientTimeout) as exc:
            return None, f"{type(exc).__name__}: {exc}"
        if ans.verb == "Error":
            return None, f"{ans.body.get('error')}: {ans.body.get('text', '')}"
        return ans.body, ""

    def poll_once(self):
        for v in self.views:
            v.status, v.error = self._ask(v.target.fm, "FarmStatus")
            if v.status is None:
                v.rp = None
                continue
            v.rp, _ = self._ask(v.target.rp, "FsmQuery")
            if v.rp and v.rp.get("instance") is not None:
                inst = v.rp["instance"]
                v.histories[inst] = list(v.rp.get("history", []))
                seq = v.sequences.setdefault(inst, [])
                if v.rp.get("state") and (not seq or seq[-1] != v.rp["state"]):
                    seq.append(v.rp["state"])
                rc = v.rp.get("run_config") or {}
                v.runs[inst] = (rc.get("pass"), rc.get("run_id"))
            al, _ = self._ask(v.target.lpf, "Alarms")
            v.alarms = (al or {}).get("alarms", [])[-self.tail:]
        self.polls += 1

    def observations(self) -> dict[str, dict]:
        return {str(v.target.fm): dict(v.histories) for v in self.views}

    def render(self) -> str:
        lines = [f"farm monitor  {time.strftime('%H:%M:%S')}  refresh {self.refresh_s:g}s"]
        for v in self.views:
            lines.append("")
            if v.status is None:
                lines.append(f"{v.target.fm}: unreachable ({v.error})")
                continue
            body = dict(v.status)
            if v.rp is not None:
                body["rp"] = v.rp
            lines.append(render.farm_status(body))
            if v.rp and v.rp.get("history"):
                lines.append("  states  " + " > ".join(v.rp["history"][-8:]))
            if v.alarms:
                lines.append("  alarms")
                lines.extend("    " + ln for ln in render.alarms(v.alarms).splitlines())
        return "\n".join(lines)

    def run(self, iterations: int | None = None):
        tty = hasattr(self.out, "isatty") and self.out.isatty()
        n = 0
        while (iterations is None or n < iterations) and not self._stop.is_set():
            if n and self._stop.wait(self.refresh_s):
                break
            self.poll_once()
            text = self.render()
            self.out.write(("\x1b[H\x1b[2J" if tty else "----\n") + text + "\n")
            self.out.flush()
            n += 1
