"""State implementations for the NodeProcessing and RunProcessing FSMs.

Both definitions live in ``lpfarm/fsm/defs``. States talk to the local
OprSysHandler for processes and to bookkeeping/node services by message;
every wait is a task, so the hosting LPF never blocks.
"""
from __future__ import annotations

import glob
import json
import os
import re
import shutil
import sys
import time

from ..fsm.engine import FsmState, state_impl
from ..lpf.message import Address, Message
from ..lpf.tasks import Sleep, Wait, WaitAll
from .records import DONE, ER, FAILED, PC, PROCESSING, STAGED, RunRecord
from .staging import read_header

OSH = Address("OprSysHandler")
SUMMARY = re.compile(r"processed (\d+) events")
LM_READY = re.compile(r"LM ready .* address=(\S+):(\d+)")
TERMINAL = ("EXITED", "SIGNALED", "LOST")


def _ok(answer, verb):
    return answer is not None and answer.verb == verb


def _why(answer) -> str:
    if answer is None:
        return "no answer"
    return f"{answer.body.get('error') or answer.verb}: {answer.body.get('text') or answer.body.get('cause', '')}"


class FarmState(FsmState):
    """Shared plumbing for failing a state and talking to local modules."""

    TARGETS = {"failed": ("Failed",), "abort": ("Failed",)}

    @property
    def lpf(self):
        return self.fsm.host.lpf

    def own_address(self) -> dict:
        lpf = self.lpf
        return Address(self.fsm.address.module, host=lpf.host, port=lpf.port).to_dict()

    def fail(self, cause: str):
        self.memory.setdefault("cause", cause)
        self.fire("fail", {"cause": cause})

    def failed(self, payload):
        self.memory.setdefault("cause", payload.get("cause", "failure"))
        return "Failed"

    def abort(self, payload):
        self.memory.setdefault("cause", payload.get("cause", "aborted by operator"))
        return "Failed"

    def enter(self, payload):
        pass

    def ask(self, verb, dest, body=None, timeout=5.0):
        return Wait(self.message(verb, dest, body), timeout)

    def kill_process(self, handle):
        if handle:
            self.send(self.message("Signal", OSH, {"handle": handle, "signal": "KILL"}))

    def note_proc_event(self, msg, key):
        """Remember the terminal ProcEvent of the process stored under ``key``."""
        if msg.verb == "ProcEvent" and msg.body.get("to") in TERMINAL and msg.body.get("handle") == self.memory.get(key):
            self.memory[f"{key}_exit"] = dict(msg.body)
            return True
        return False


# -- NodeProcessing -----------------------------------------------------------

@state_impl("NpConfigure")
class NpConfigure(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("StartElf",))

    def enter(self, payload):
        cfg = self.config
        try:
            workdir = cfg["workdir"]
            os.makedirs(workdir, exist_ok=True)
            with open(os.path.join(workdir, "node_config.json"), "w", encoding="utf-8") as fh:
                json.dump(cfg, fh, indent=1, sort_keys=True)
        except (KeyError, OSError) as exc:
            self.fail(f"ConfigError: {exc}")
            return
        self.fire("configured")

    def proceed(self, payload):
        return "StartElf"


def elf_command(cfg: dict) -> list[str]:
    cmd = list(cfg.get("elf_command") or [sys.executable, "-m", "lpfarm.farm.mock_elf"])
    cmd += ["--node", str(cfg["node"]), "--workdir", str(cfg["workdir"])]
    if cfg.get("lm"):
        cmd += ["--lm", str(cfg["lm"])]
    elif cfg.get("events") is not None:
        cmd += ["--events", str(cfg["events"])]
    return cmd + [str(a) for a in cfg.get("elf_args", [])]


@state_impl("NpStartElf")
class NpStartElf(FarmState):
    TARGETS = dict(FarmState.TARGETS, running=("RunElf",))

    def enter(self, payload):
        self.spawn(self._start())

    def _start(self):
        limits = {"max_runtime_s": self.config.get("elf_max_runtime_s")}
        ans = yield self.ask("Start", OSH, {"command": elf_command(self.config), "limits": limits,
                                            "cwd": self.config["workdir"]})
        if not _ok(ans, "Started"):
            self.fail(f"ExecFailure: {_why(ans)}")
            return
        self.memory["elf"] = ans.body["handle"]
        self.fire("started")

    def on_message(self, msg):
        self.note_proc_event(msg, "elf")

    def running(self, payload):
        return "RunElf"


@state_impl("NpRunElf")
class NpRunElf(FarmState):
    TARGETS = dict(FarmState.TARGETS, finished=("CheckLocks", "Failed"))

    def enter(self, payload):
        if "elf_exit" in self.memory:
            self.fire("exited")

    def on_message(self, msg):
        if self.note_proc_event(msg, "elf"):
            self.fire("exited")

    def on_timeout(self):
        self.kill_process(self.memory.get("elf"))
        self.fail("Timeout: Elf exceeded the RunElf state timeout")

    def abort(self, payload):
        self.kill_process(self.memory.get("elf"))
        return super().abort(payload)

    def finished(self, payload):
        ev = self.memory["elf_exit"]
        if ev["to"] == "EXITED" and ev.get("exit_code") == 0:
            return "CheckLocks"
        how = f"exit code {ev.get('exit_code')}" if ev["to"] == "EXITED" else f"{ev['to']} {ev.get('signal') or ''}"
        self.memory.setdefault("cause", f"ElfCrash: {how.strip()}")
        return "Failed"


@state_impl("NpCheckLocks")
class NpCheckLocks(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("GatherOutput",))

    def enter(self, payload):
        locks = sorted(glob.glob(os.path.join(self.config["workdir"], "*.lock")))
        if locks:
            self.fail("LockOutstanding: " + ", ".join(os.path.basename(p) for p in locks))
        else:
            self.fire("clean")

    def proceed(self, payload):
        return "GatherOutput"


@state_impl("NpGatherOutput")
class NpGatherOutput(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("Report",))

    def enter(self, payload):
        self.spawn(self._gather())

    def _gather(self):
        lines = {}
        for channel in ("STDOUT", "STDERR"):
            ans = yield self.ask("FetchOutput", OSH, {"handle": self.memory["elf"], "channel": channel})
            if not _ok(ans, "Output"):
                self.fail(f"OutputUnparseable: cannot fetch Elf output: {_why(ans)}")
                return
            lines[channel] = ans.body["lines"]
        try:
            with open(os.path.join(self.config["workdir"], "elf.log"), "w", encoding="utf-8") as fh:
                fh.writelines(l + "\n" for l in lines["STDOUT"] + lines["STDERR"])
        except OSError as exc:
            self.alarm("WARNING", f"cannot write Elf log: {exc}")
        counts = [int(m[1]) for m in map(SUMMARY.search, lines["STDOUT"]) if m]
        if not counts:
            self.fail("OutputUnparseable: no 'processed N events' line")
            return
        self.memory["events"] = counts[-1]
        self.fire("gathered")

    def proceed(self, payload):
        return "Report"


@state_impl("NpFailed")
class NpFailed(FarmState):
    TARGETS = {"proceed": ("Report",)}

    def enter(self, payload):
        ev = self.memory.get("elf_exit")
        if self.memory.get("elf") and ev is None:
            self.kill_process(self.memory["elf"])
        self.alarm("ERROR", f"node {self.config.get('node')}: {self.memory.get('cause')}")
        self.fire("report")

    def proceed(self, payload):
        return "Report"


@state_impl("NpReport")
class NpReport(FarmState):
    TARGETS = {"proceed": ("Done",)}

    def enter(self, payload):
        cause = self.memory.get("cause")
        body = {"node": self.config.get("node"), "run_id": self.config.get("run_id"),
                "ok": cause is None, "events": self.memory.get("events", 0) if cause is None else 0,
                "cause": cause or ""}
        target = self.config.get("report_to")
        if target:
            self.send(self.message("NodeResult", Address.from_dict(target), body))
        self.memory["result"] = body
        self.fire("reported")

    def proceed(self, payload):
        return "Done"


# -- RunProcessing ------------------------------------------------------------

def bk_address(cfg) -> Address:
    name = cfg.get("bookkeeping", "Bookkeeping")
    domain = cfg.get("domain")
    if domain:
        return Address(name, domain=domain, service=name)
    return Address(name)


def node_address(cfg, node: dict) -> Address:
    svc = node["service"]
    if node.get("host"):
        return Address(svc, host=node["host"], port=int(node["port"]))
    return Address(svc, domain=cfg["domain"], service=svc)


@state_impl("RpCollectInfo")
class RpCollectInfo(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("CheckInput",))

    def enter(self, payload):
        self.memory["started_at"] = time.time()
        self.spawn(self._collect())

    def _collect(self):
        cfg = self.config
        ans = yield self.ask("BkGet", bk_address(cfg), {"run_id": cfg["run_id"], "pass": cfg["pass"]})
        if not _ok(ans, "BkRecord"):
            self.fail(f"InfoMissing: run {cfg['run_id']}: {_why(ans)}")
            return
        self.memory["record"] = ans.body["record"]
        self.fire("collected")

    def proceed(self, payload):
        return "CheckInput"


@state_impl("RpCheckInput")
class RpCheckInput(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("MarkProcessing",))

    def enter(self, payload):
        cfg = self.config
        rec = RunRecord.from_dict(self.memory["record"])
        allowed = {STAGED, FAILED} | ({DONE} if cfg.get("rerun") else set())
        problems = []
        if rec.status not in allowed:
            problems.append(f"status {rec.status} is not startable")
        if rec.pass_type == ER and not rec.calibrated:
            problems.append("run is not calibrated")
        try:
            run, events = read_header(rec.xtc_path)
            if run != rec.run_id or events != rec.events_total:
                problems.append(f"XTC header run={run} events={events} disagrees with the catalog")
        except (OSError, ValueError, KeyError) as exc:
            problems.append(f"XTC unreadable: {exc}")
        if not cfg.get("nodes"):
            problems.append("no nodes configured")
        if problems:
            self.fail("ConsistencyFailure: " + "; ".join(problems))
        else:
            self.fire("consistent")

    def proceed(self, payload):
        return "MarkProcessing"


@state_impl("RpMarkProcessing")
class RpMarkProcessing(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("MakeLogDir",))

    def enter(self, payload):
        self.spawn(self._mark())

    def _mark(self):
        rec = RunRecord.from_dict(self.memory["record"])
        rec.status, rec.events_processed, rec.cause, rec.nodes = PROCESSING, 0, "", {}
        rec.timestamps = dict(rec.timestamps, start=self.memory["started_at"])
        ans = yield self.ask("BkPut", bk_address(self.config), {"record": rec.to_dict()})
        if not _ok(ans, "BkStored"):
            self.fail(f"BookkeepingFailure: {_why(ans)}")
            return
        self.memory["record"] = ans.body["record"]
        self.fire("marked")

    def proceed(self, payload):
        return "MakeLogDir"


def run_dir(cfg) -> str:
    return os.path.join(cfg["farm_root"], str(cfg["pass"]), f"run{int(cfg['run_id']):06d}")


@state_impl("RpMakeLogDir")
class RpMakeLogDir(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("StartLM",))

    def enter(self, payload):
        path = run_dir(self.config)
        try:
            if os.path.isdir(path):
                shutil.rmtree(path)  # a rerun starts from a clean directory
            os.makedirs(path)
        except OSError as exc:
            self.fail(f"LogDirFailure: {exc}")
            return
        self.memory["log_dir"] = path
        self.fire("created")

    def proceed(self, payload):
        return "StartLM"


@state_impl("RpStartLM")
class RpStartLM(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("AttachMonitor",))

    def enter(self, payload):
        self.spawn(self._start())

    def _start(self):
        cfg, rec = self.config, self.memory["record"]
        nodes = ",".join(n["name"] for n in cfg["nodes"])
        cmd = list(cfg.get("lm_command") or [sys.executable, "-m", "lpfarm.farm.mock_lm"])
        cmd += ["--xtc", rec["xtc_path"], "--nodes", nodes, "--host", self.lpf.host or "127.0.0.1", "--port", "0"]
        ans = yield self.ask("Start", OSH, {"command": cmd, "cwd": self.memory["log_dir"]})
        if not _ok(ans, "Started"):
            self.fail(f"LMFailure: {_why(ans)}")
            return
        self.memory["lm"] = ans.body["handle"]
        deadline = self.now() + float(cfg.get("lm_ready_s", 10))
        while self.now() < deadline:
            out = yield self.ask("FetchOutput", OSH, {"handle": self.memory["lm"]})
            if _ok(out, "Output"):
                for line in out.body["lines"]:
                    m = LM_READY.search(line)
                    if m:
                        self.memory["lm_address"] = f"{m[1]}:{m[2]}"
                        self.fire("lm_ready")
                        return
            if "lm_exit" in self.memory:
                break
            yield Sleep(0.02)
        self.fail("LMFailure: Logging Manager did not become ready")

    def on_message(self, msg):
        self.note_proc_event(msg, "lm")

    def proceed(self, payload):
        return "AttachMonitor"


def drain_lm(state: FarmState):
    """Task helper: copy new LM output into the run's lm.log."""
    mem = state.memory
    ans = yield state.ask("FetchOutput", OSH, {"handle": mem["lm"], "from_line": mem.get("lm_line", 0)})
    if not _ok(ans, "Output"):
        return
    mem["lm_line"] = ans.body["next_line"]
    if ans.body["lines"]:
        with open(os.path.join(mem["log_dir"], "lm.log"), "a", encoding="utf-8") as fh:
            fh.writelines(l + "\n" for l in ans.body["lines"])


@state_impl("RpAttachMonitor")
class RpAttachMonitor(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("WriteNodeConfig",))

    def enter(self, payload):
        self.spawn(self._monitor(), f"{self.fsm.definition.name}.lm-monitor", keep=True)
        self.fire("attached")

    def _monitor(self):
        period = float(self.config.get("monitor_period_s", 0.25))
        while "lm_exit" not in self.memory:
            yield from drain_lm(self)
            yield Sleep(period)

    def proceed(self, payload):
        return "WriteNodeConfig"


@state_impl("RpWriteNodeConfig")
class RpWriteNodeConfig(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("StartNodes",))

    def enter(self, payload):
        cfg = self.config
        faults = cfg.get("node_faults") or {}
        out = {}
        try:
            for node in cfg["nodes"]:
                name = node["name"]
                ncfg = {"node": name, "run_id": cfg["run_id"], "pass": cfg["pass"],
                        "workdir": os.path.join(self.memory["log_dir"], name),
                        "lm": self.memory["lm_address"], "report_to": self.own_address(),
                        "elf_args": list(cfg.get("elf_args", [])) + list(faults.get(name, [])),
                        "elf_max_runtime_s": cfg.get("elf_max_runtime_s")}
                with open(os.path.join(self.memory["log_dir"], f"{name}.json"), "w", encoding="utf-8") as fh:
                    json.dump(ncfg, fh, indent=1, sort_keys=True)
                out[name] = ncfg
        except OSError as exc:
            self.fail(f"ConfigWriteFailure: {exc}")
            return
        self.memory["node_cfgs"] = out
        self.fire("written")

    def proceed(self, payload):
        return "StartNodes"


@state_impl("RpStartNodes")
class RpStartNodes(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("WaitNodes",))

    def enter(self, payload):
        self.memory["results"] = {}
        self.spawn(self._start())

    def _start(self):
        cfg = self.config
        nodes = cfg["nodes"]
        asks = [self.message("FsmStart", node_address(cfg, n), {"run_config": self.memory["node_cfgs"][n["name"]]})
                for n in nodes]
        answers = yield WaitAll(asks, timeout=float(cfg.get("node_start_s", 5)))
        bad = [f"{n['name']} ({_why(a)})" for n, a in zip(nodes, answers) if not _ok(a, "FsmStarted")]
        for n, a in zip(nodes, answers):
            if _ok(a, "FsmStarted"):
                self.memory.setdefault("started_nodes", []).append(n["name"])
            else:
                self.memory["results"][n["name"]] = {"node": n["name"], "ok": False, "events": 0,
                                                     "cause": f"NodeFailure: not started: {_why(a)}"}
        if bad:
            self.fail("NodeFailure: could not start " + ", ".join(bad))
        else:
            self.fire("started")

    def on_message(self, msg):
        if msg.verb == "NodeResult":
            self.memory["results"][msg.body["node"]] = dict(msg.body)
        self.note_proc_event(msg, "lm")

    def proceed(self, payload):
        return "WaitNodes"


@state_impl("RpWaitNodes")
class RpWaitNodes(FarmState):
    """The long wait: node results arrive as NodeResult messages.

    A watchdog task queries each silent node; a node whose LPF stops
    answering is recorded as lost.
    """

    TARGETS = dict(FarmState.TARGETS, proceed=("StopLM",))

    def enter(self, payload):
        self.spawn(self._watchdog())
        self._check()

    def _pending(self):
        return [n for n in self.config["nodes"] if n["name"] not in self.memory["results"]]

    def _check(self):
        if not self._pending() and not self.memory.get("all_in"):
            self.memory["all_in"] = True
            self.fire("all_returned")

    def _watchdog(self):
        cfg = self.config
        period = float(cfg.get("watchdog_period_s", 0.5))
        while self._pending():
            yield Sleep(period)
            pending = self._pending()
            if not pending:
                break
            answers = yield WaitAll([self.message("FsmQuery", node_address(cfg, n)) for n in pending],
                                    timeout=float(cfg.get("watchdog_timeout_s", 2.0)))
            for n, a in zip(pending, answers):
                if n["name"] in self.memory["results"]:
                    continue
                if not _ok(a, "FsmState"):
                    self.memory["results"][n["name"]] = {"node": n["name"], "ok": False, "events": 0,
                                                         "cause": f"NodeLost: {_why(a)}"}
                elif a.body.get("status") == "FAULTED":
                    self.memory["results"][n["name"]] = {"node": n["name"], "ok": False, "events": 0,
                                                         "cause": f"NodeFailure: {a.body.get('fault')}"}
            self._check()

    def on_message(self, msg):
        if msg.verb == "NodeResult":
            self.memory["results"][msg.body["node"]] = dict(msg.body)
            self._check()
        self.note_proc_event(msg, "lm")

    def on_timeout(self):
        for n in self._pending():
            self.memory["results"][n["name"]] = {"node": n["name"], "ok": False, "events": 0,
                                                 "cause": "Timeout: no result before the WaitNodes timeout"}
        self._check()

    def proceed(self, payload):
        return "StopLM"


@state_impl("RpStopLM")
class RpStopLM(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("CheckResults",))

    def enter(self, payload):
        self.spawn(self._stop())

    def _stop(self):
        deadline = self.now() + float(self.config.get("lm_exit_s", 2.0))
        while "lm_exit" not in self.memory and self.now() < deadline:
            yield Sleep(0.02)
        if "lm_exit" not in self.memory:
            self.memory["lm_killed"] = True
            ans = yield self.ask("Signal", OSH, {"handle": self.memory["lm"], "signal": "KILL"})
            if _ok(ans, "Signaled") or (ans is not None and ans.body.get("error") == "InvalidTransition"):
                self.memory.setdefault("lm_exit", {"to": "SIGNALED"})
        yield from drain_lm(self)
        self.fire("stopped")

    def on_message(self, msg):
        self.note_proc_event(msg, "lm")

    def proceed(self, payload):
        return "CheckResults"


def node_outcomes(results: dict) -> dict:
    return {name: {"ok": bool(r.get("ok")), "events": int(r.get("events", 0)), "cause": r.get("cause", "")}
            for name, r in sorted(results.items())}


@state_impl("RpCheckResults")
class RpCheckResults(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("Bookkeep",))

    def enter(self, payload):
        results = self.memory["results"]
        total = int(self.memory["record"]["events_total"])
        bad = sorted(n for n, r in results.items() if not r.get("ok"))
        allowed = int(float(self.config.get("node_tolerance", 0.0)) * len(results))
        events = sum(int(r.get("events", 0)) for r in results.values() if r.get("ok"))
        self.memory["events"] = events
        if len(bad) > allowed:
            causes = "; ".join(f"{n}: {results[n].get('cause')}" for n in bad)
            self.fail(f"NodeFailure: {causes}")
        elif events != total:
            self.fail(f"ConsistencyFailure: nodes processed {events} of {total} events")
        else:
            self.fire("consistent")

    def proceed(self, payload):
        return "Bookkeep"


def _final_record(state: FarmState, status: str) -> RunRecord:
    mem = state.memory
    rec = RunRecord.from_dict(mem["record"])
    rec.status = status
    rec.events_processed = min(int(mem.get("events", 0)), rec.events_total)
    rec.nodes = node_outcomes(mem.get("results", {}))
    rec.log_dir = mem.get("log_dir", "")
    rec.cause = "" if status == DONE else str(mem.get("cause", ""))
    rec.timestamps = dict(rec.timestamps, end=time.time())
    return rec


@state_impl("RpBookkeep")
class RpBookkeep(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("PostProcess",))

    def enter(self, payload):
        self.spawn(self._write())

    def _write(self):
        cfg = self.config
        rec = _final_record(self, DONE)
        ans = yield self.ask("BkPut", bk_address(cfg), {"record": rec.to_dict()})
        if not _ok(ans, "BkStored"):
            self.fail(f"BookkeepingFailure: {_why(ans)}")
            return
        if rec.pass_type == PC:
            # The calibration entry that lets the ER pass take this run.
            er = yield self.ask("BkGet", bk_address(cfg), {"run_id": rec.run_id, "pass": ER})
            if _ok(er, "BkRecord"):
                er_rec = RunRecord.from_dict(er.body["record"])
                er_rec.calibrated = True
                er_rec.timestamps = dict(er_rec.timestamps, calibrated=time.time())
                ans = yield self.ask("BkPut", bk_address(cfg), {"record": er_rec.to_dict()})
                if not _ok(ans, "BkStored"):
                    self.fail(f"BookkeepingFailure: calibration entry: {_why(ans)}")
                    return
        self.memory["final_status"] = DONE
        self.fire("recorded")

    def proceed(self, payload):
        return "PostProcess"


@state_impl("RpPostProcess")
class RpPostProcess(FarmState):
    TARGETS = dict(FarmState.TARGETS, proceed=("Closed",))

    def enter(self, payload):
        qa = self.config.get("qa_command")
        if not qa:
            self.fire("done")
            return
        self.spawn(self._qa(list(qa) + [str(self.config["run_id"]), self.memory["log_dir"]]))

    def _qa(self, cmd):
        ans = yield self.ask("Start", OSH, {"command": cmd, "cwd": self.memory["log_dir"]})
        if not _ok(ans, "Started"):
            self.alarm("WARNING", f"QA hook did not start: {_why(ans)}")
            self.fire("done")
            return
        self.memory["qa"] = ans.body["handle"]
        while "qa_exit" not in self.memory:
            yield Sleep(0.05)
        self.fire("done")

    def on_message(self, msg):
        self.note_proc_event(msg, "qa")

    def proceed(self, payload):
        return "Closed"


@state_impl("RpFailed")
class RpFailed(FarmState):
    """Stop what is still running, then record the failure in full."""

    TARGETS = {"proceed": ("Closed",)}

    def enter(self, payload):
        self.alarm("ERROR", f"run {self.config.get('run_id')} ({self.config.get('pass')}) failed: "
                            f"{self.memory.get('cause')}")
        self.spawn(self._cleanup())

    def _cleanup(self):
        cfg, mem = self.config, self.memory
        results = mem.setdefault("results", {})
        for n in mem.get("started_nodes", []):
            if n not in results:
                node = next(x for x in cfg["nodes"] if x["name"] == n)
                self.send(self.message("FsmTransition", node_address(cfg, node),
                                       {"transition": "abort", "payload": {"cause": "run failed"}}))
                results[n] = {"node": n, "ok": False, "events": 0, "cause": "Aborted: run failed"}
        for n in cfg.get("nodes", []):
            results.setdefault(n["name"], {"node": n["name"], "ok": False, "events": 0, "cause": "NotStarted"})
        if mem.get("lm") and "lm_exit" not in mem:
            self.kill_process(mem["lm"])
        if mem.get("lm") and mem.get("log_dir"):
            yield Sleep(0.05)
            yield from drain_lm(self)
        if "record" in mem:
            mem["events"] = sum(int(r.get("events", 0)) for r in results.values() if r.get("ok"))
            rec = _final_record(self, FAILED)
            ans = yield self.ask("BkPut", bk_address(cfg), {"record": rec.to_dict()})
            if not _ok(ans, "BkStored"):
                self.alarm("ERROR", f"run {cfg.get('run_id')}: failure not recorded: {_why(ans)}")
        mem["final_status"] = FAILED
        self.fire("recorded")

    def on_message(self, msg):
        self.note_proc_event(msg, "lm")

    def proceed(self, payload):
        return "Closed"


@state_impl("RpClosed")
class RpClosed(FarmState):
    """Final state: leave a summary next to the logs and tell the FarmManager."""

    TARGETS = {}

    def enter(self, payload):
        cfg, mem = self.config, self.memory
        summary = {"run_id": cfg.get("run_id"), "pass": cfg.get("pass"),
                   "status": mem.get("final_status", FAILED), "cause": mem.get("cause", "") if
                   mem.get("final_status") != DONE else "", "events": mem.get("events", 0),
                   "nodes": node_outcomes(mem.get("results", {}))}
        if mem.get("log_dir"):
            try:
                with open(os.path.join(mem["log_dir"], "summary.json"), "w", encoding="utf-8") as fh:
                    json.dump(summary, fh, indent=1, sort_keys=True)
            except OSError as exc:
                self.alarm("WARNING", f"cannot write run summary: {exc}")
        if cfg.get("fm"):
            self.send(self.message("RunFinished", Address.from_dict(cfg["fm"]), summary))
        mem["summary"] = summary
