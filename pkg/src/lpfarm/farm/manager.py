"""FarmManager: the broker between the staging/scheduling layer and one farm."""
from __future__ import annotations

import time

from ..lpf import registry
from ..lpf.core import Module
from ..lpf.message import Address, Message, error_reply
from ..lpf.tasks import Wait, WaitAll
from .records import PASSES

IDLE, STARTING, RUNNING = "IDLE", "STARTING", "RUNNING"

# Run configuration keys copied from the FarmManager config into each run.
RUN_KEYS = ("farm_root", "elf_args", "elf_command", "lm_command", "qa_command", "node_tolerance",
            "elf_max_runtime_s", "watchdog_period_s", "watchdog_timeout_s", "monitor_period_s", "lm_ready_s",
            "node_start_s", "lm_exit_s")


@registry.module_type("FarmManager")
class FarmManager(Module):
    """Picks eligible runs and has a fresh RunProcessing instance process each.

    Registered in both naming domains of its farm: the upper one (staging,
    scheduling, catalog) and the lower one (run and node processing).
    """

    def init(self, config):
        self.config = config
        self.pass_type = str(config.get("pass", "PC")).upper()
        if self.pass_type not in PASSES:
            raise ValueError(f"FarmManager pass must be one of {PASSES}")
        self.upper = str(config.get("upper", "upper"))
        self.lower = str(config.get("lower", self.pass_type.lower()))
        self.nodes = [str(n) for n in config.get("nodes", [])]
        self.phase = IDLE
        self.run_id: int | None = None
        self.started_at: float | None = None
        self.history: list[dict] = []
        self.starts: list[dict] = []
        self.auto = bool(config.get("auto", False))
        self.rp_last: dict | None = None
        self._cron = self.lpf.schedule_cron(float(config.get("poll_s", 1.0)),
                                            Message("FmTick", self.address, self.address))

    def kill(self):
        self.lpf.cancel_cron(self._cron)

    # -- addressing -----------------------------------------------------------
    def upper_service(self, key: str, default: str) -> Address:
        name = str(self.config.get(key, default))
        return Address(name, domain=self.upper, service=name)

    def lower_service(self, name: str) -> Address:
        return Address(name, domain=self.lower, service=name)

    @property
    def rp(self) -> Address:
        return self.lower_service(str(self.config.get("rp_service", "RunProcessing")))

    def node_entries(self) -> list[dict]:
        prefix = str(self.config.get("node_service_prefix", "NodeProcessing_"))
        return [{"name": n, "service": f"{prefix}{n}"} for n in self.nodes]

    def my_address(self) -> dict:
        return Address(self.name, host=self.lpf.host, port=self.lpf.port).to_dict()

    # -- messages -------------------------------------------------------------
    def do(self, msg):
        b = msg.body
        if msg.verb == "StartRun":
            if self.phase != IDLE:
                return [error_reply(msg, "Busy", f"run {self.run_id} is {self.phase.lower()}", run_id=self.run_id)]
            self.phase = STARTING
            self.spawn(self._start(msg, b.get("run_id"), dict(b)), f"{self.name}.start")
            return None
        if msg.verb == "RunFinished":
            self._finished(b)
            return None
        if msg.verb == "FarmStatus":
            self.spawn(self._status(msg), f"{self.name}.status")
            return None
        if msg.verb == "AbortRun":
            if self.phase != RUNNING:
                return [error_reply(msg, "NotRunning", "no run in progress")]
            self.spawn(self._abort(msg), f"{self.name}.abort")
            return None
        if msg.verb == "SetAuto":
            self.auto = bool(b.get("auto", True))
            return [msg.reply("AutoSet", {"auto": self.auto})]
        if msg.verb == "FarmHistory":
            return [msg.reply("FarmHistoryAnswer", {"pass": self.pass_type, "runs": list(self.history),
                                                    "starts": list(self.starts)})]
        if msg.verb == "FmTick":
            if self.auto and self.phase == IDLE:
                self.phase = STARTING
                self.spawn(self._start(None, None, {}), f"{self.name}.auto")
            return None
        if msg.is_answer:
            return None
        return [error_reply(msg, "UnknownVerb", msg.verb)]

    def _answer(self, req, verb, body=None, error=None, text=""):
        if req is None:
            if error and error != "NoEligibleRun":
                self.lpf.alarm("WARNING", f"automatic start failed: {error}: {text}", module=self.name)
            return
        self.lpf.post(error_reply(req, error, text) if error else req.reply(verb, body or {}))

    def _ask(self, verb, dest, body, timeout=5.0):
        return Wait(Message(verb, dest, self.address, body), timeout)

    def _start(self, req, run_id, opts):
        try:
            ok = yield from self._try_start(req, run_id, opts)
        finally:
            if self.phase == STARTING:
                self.phase = IDLE
        return ok

    def _try_start(self, req, run_id, opts):
        sched = self.upper_service("scheduler", "Scheduler")
        if run_id is None:
            ans = yield self._ask("NextRun", sched, {"pass": self.pass_type})
            if ans is None or ans.verb != "NextRunAnswer":
                self._answer(req, None, error="SchedulerUnavailable", text=_why(ans))
                return False
            run_id = ans.body["run_id"]
            if run_id is None:
                self._answer(req, None, error="NoEligibleRun", text=f"no {self.pass_type} run is eligible")
                return False
        else:
            ans = yield self._ask("CheckRun", sched, {"pass": self.pass_type, "run_id": int(run_id),
                                                      "rerun": bool(opts.get("rerun"))})
            if ans is None or ans.verb != "RunEligibility":
                self._answer(req, None, error="SchedulerUnavailable", text=_why(ans))
                return False
            if not ans.body["eligible"]:
                self._answer(req, None, error="NotEligible", text=f"{self.pass_type} run {run_id} is not eligible")
                return False
        run_id = int(run_id)
        run_config = {k: self.config[k] for k in RUN_KEYS if k in self.config}
        run_config.update({"run_id": run_id, "pass": self.pass_type, "domain": self.lower,
                           "nodes": self.node_entries(), "fm": self.my_address(),
                           "bookkeeping": str(self.config.get("bookkeeping", "Bookkeeping")),
                           "rerun": bool(opts.get("rerun"))})
        for key in ("node_faults", "elf_args", "qa_command"):
            if opts.get(key) is not None:
                run_config[key] = opts[key]
        asked_at = time.time()
        ans = yield self._ask("FsmStart", self.rp, {"run_config": run_config})
        if ans is None or ans.verb != "FsmStarted":
            self._answer(req, None, error="RunProcessingUnavailable", text=_why(ans))
            return False
        self.phase, self.run_id, self.started_at = RUNNING, run_id, time.time()
        if any(h.get("run_id") == run_id and h["finished_at"] >= asked_at for h in self.history):
            self.phase, self.run_id = IDLE, None  # it already finished (fast failure)
        self.rp_last = ans.body
        self.starts.append({"run_id": run_id, "at": self.started_at, "instance": ans.body.get("instance")})
        self.lpf.info(f"{self.pass_type} run {run_id} started", module=self.name)
        self._answer(req, "RunStarted", {"run_id": run_id, "pass": self.pass_type,
                                         "instance": ans.body.get("instance")})
        return True

    def _finished(self, body):
        entry = dict(body, finished_at=time.time())
        self.history.append(entry)
        if body.get("run_id") == self.run_id:
            self.phase, self.run_id = IDLE, None
        level = "INFO" if body.get("status") == "DONE" else "ERROR"
        self.lpf.alarm(level, f"{self.pass_type} run {body.get('run_id')} finished {body.get('status')}"
                              f"{': ' + body['cause'] if body.get('cause') else ''}", module=self.name)

    def _status(self, req):
        timeout = float(self.config.get("status_timeout_s", 1.0))
        entries = self.node_entries()
        asks = [Message("FsmQuery", self.rp, self.address)]
        asks += [Message("FsmQuery", self.lower_service(n["service"]), self.address) for n in entries]
        answers = yield WaitAll(asks, timeout)
        rp = answers[0].body if answers[0] is not None and answers[0].verb == "FsmState" else None
        if rp is not None:
            self.rp_last = rp
        nodes = []
        for n, a in zip(entries, answers[1:]):
            if a is not None and a.verb == "FsmState":
                nodes.append({"name": n["name"], "reachable": True, "state": a.body.get("state"),
                              "status": a.body.get("status"), "run_id": (a.body.get("run_config") or {}).get("run_id")})
            else:
                nodes.append({"name": n["name"], "reachable": False, "state": None, "status": None,
                              "run_id": None, "error": _why(a)})
        self.lpf.post(req.reply("FarmStatusAnswer", {
            "pass": self.pass_type, "phase": self.phase, "run_id": self.run_id, "auto": self.auto,
            "nodes": nodes, "upper": self.upper, "lower": self.lower,
            "rp": rp, "rp_reachable": rp is not None, "history": list(self.history[-20:])}))

    def _abort(self, req):
        ans = yield self._ask("FsmTransition", self.rp, {"transition": "abort",
                                                          "payload": {"cause": "aborted by operator"}})
        if ans is None or ans.verb != "FsmStepped":
            self.lpf.post(error_reply(req, "AbortFailed", _why(ans)))
        else:
            self.lpf.post(req.reply("AbortRequested", {"run_id": self.run_id, "rp": ans.body}))


def _why(ans) -> str:
    if ans is None:
        return "no answer"
    return f"{ans.body.get('error', ans.verb)} {ans.body.get('text', '')}".strip()
