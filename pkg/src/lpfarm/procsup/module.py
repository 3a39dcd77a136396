"""OprSysHandler: the message interface to the process supervisor."""
from __future__ import annotations

from ..lpf import registry
from ..lpf.core import ACTIVE, Module
from ..lpf.message import Message, error_reply
from ..lpf.tasks import Sleep
from .supervisor import (STDOUT, ExecFailure, ProcessSupervisor, SupervisorError, UnknownHandle)

SIGNAL_ACK_TIMEOUT = 2.0


@registry.module_type("OprSysHandler")
class OprSysHandler(Module):
    """Start/QueryStatus/FetchOutput/Signal on external processes.

    Whoever sends ``Start`` receives a ``ProcEvent`` for every state change
    of that process (unless the request says ``notify: false``).
    """

    kind = ACTIVE

    def init(self, config):
        self.config = config
        self.sup = ProcessSupervisor(self.lpf.clock, on_event=self._on_event,
                                     max_output_lines=int(config.get("max_output_lines", 10000)),
                                     on_runaway=self._on_runaway)
        self.events: list[dict] = []

    def run(self):
        self.sup.poll()

    def kill(self):
        self.sup.kill_all()

    def _on_event(self, ev):
        self.events.append(ev)
        h = self.sup.handles.get(ev["handle"])
        dest = h.notify if h is not None else None
        if dest is not None:
            self.lpf.post(Message("ProcEvent", dest, self.address, dict(ev)))
        if ev["to"] in ("SIGNALED", "LOST") and not ev.get("killed_for"):
            self.lpf.alarm("INFO", f"process {ev['handle']} ended {ev['to']} {ev.get('cause', '')}".rstrip(),
                           module=self.name)

    def _on_runaway(self, h):
        self.lpf.alarm("ERROR", f"process {h.handle_id} ({h.command[0]}) killed: {h.killed_for}",
                       module=self.name)

    def do(self, msg):
        b = msg.body
        try:
            if msg.verb == "Start":
                return self._start(msg)
            if msg.verb == "QueryStatus":
                return [msg.reply("ProcStatus", self.sup.query_status(str(b["handle"])))]
            if msg.verb == "FetchOutput":
                out = self.sup.fetch_output(str(b["handle"]), str(b.get("channel", STDOUT)).upper(),
                                            int(b.get("from_line", 0)))
                return [msg.reply("Output", out)]
            if msg.verb == "Signal":
                sig = str(b["signal"]).upper()
                self.sup.signal(str(b["handle"]), sig)
                self.spawn(self._ack(msg, str(b["handle"]), sig), f"{self.name}.signal")
                return None
            if msg.verb == "ListProcesses":
                now = self.lpf.clock.now()
                return [msg.reply("ProcessList", {"processes": [h.status(now) for h in self.sup.handles.values()]})]
        except SupervisorError as exc:
            return [error_reply(msg, exc.kind, str(exc))]
        except (KeyError, TypeError, ValueError) as exc:
            return [error_reply(msg, "BadRequest", str(exc))]
        if msg.is_answer:
            return None
        return [error_reply(msg, "UnknownVerb", msg.verb)]

    def _start(self, msg):
        b = msg.body
        command = b.get("command")
        if isinstance(command, str):
            command = [command]
        try:
            h = self.sup.start(command, b.get("env"), b.get("limits"), b.get("cwd"),
                               notify=msg.source if b.get("notify", True) else None)
        except ExecFailure as exc:
            self.lpf.alarm("WARNING", str(exc), module=self.name)
            return [error_reply(msg, "ExecFailure", str(exc), handle=exc.handle.handle_id if exc.handle else None)]
        return [msg.reply("Started", {"handle": h.handle_id, "pid": h.pid, "state": h.state})]

    def _ack(self, msg, handle_id, sig):
        want = self.sup.expected_state(sig)
        deadline = self.lpf.clock.now() + SIGNAL_ACK_TIMEOUT
        while True:
            try:
                h = self.sup.get(handle_id)
            except UnknownHandle as exc:
                self.lpf.post(error_reply(msg, exc.kind, str(exc)))
                return
            if h.state in want:
                self.lpf.post(msg.reply("Signaled", {"handle": handle_id, "signal": sig, "state": h.state}))
                return
            if self.lpf.clock.now() >= deadline:
                self.lpf.post(error_reply(msg, "Timeout", f"{sig} not observed on {handle_id}", state=h.state))
                return
            yield Sleep(0.01)
