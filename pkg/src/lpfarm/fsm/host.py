"""FsmHost: the LPF module that runs one FSM instance at a time."""
from __future__ import annotations

import os

from ..lpf import registry
from ..lpf.core import ACTIVE, Module
from ..lpf.message import error_reply
from .dsl import FsmError, parse_fsm, validate_fsm
from .engine import FAULT, FsmInstance, NotRunning

DEFS_DIR = os.path.join(os.path.dirname(__file__), "defs")


def load_definition_text(ref: str) -> str:
    """DSL text for a shipped definition name (``NodeProcessing``) or a file path."""
    if os.path.sep in ref or ref.endswith(".fsm"):
        path = ref
    else:
        path = os.path.join(DEFS_DIR, f"{ref}.fsm")
    with open(path, encoding="utf-8") as fh:
        return fh.read()


@registry.module_type("FsmHost")
class FsmHost(Module):
    """Loads a definition and runs fresh instances of it.

    Config: ``definition`` (shipped name or path), ``policy`` (FAULT or
    IGNORE for undefined transitions), ``run_config`` (defaults merged
    under each FsmStart). Messages other than the Fsm* verbs go to the
    current state's ``on_message``.
    """

    kind = ACTIVE

    def init(self, config):
        self.config = config
        self.definition = None
        self.instance: FsmInstance | None = None
        self.policy = config.get("policy", FAULT)
        self.instances_started = 0
        if config.get("definition"):
            self.load_definition(load_definition_text(config["definition"]))

    def load_definition(self, text: str):
        defn = parse_fsm(text)
        issues = validate_fsm(defn)
        if issues:
            raise FsmError("; ".join(map(str, issues)))
        self.definition = defn
        return defn

    def start_instance(self, run_config: dict | None = None) -> FsmInstance:
        if self.definition is None:
            raise FsmError("no FSM definition loaded")
        if self.instance is not None:
            self.instance.close()
        cfg = dict(self.config.get("run_config") or {})
        cfg.update(run_config or {})
        self.instance = FsmInstance(self.definition, cfg, clock=self.lpf.clock, policy=self.policy,
                                    address=self.address, on_alarm=self._alarm, spawner=self._spawn, host=self)
        self.instances_started += 1
        self.instance.start()
        self._flush()
        return self.instance

    def _alarm(self, level, text):
        self.lpf.alarm(level, text, module=self.name)

    def _spawn(self, gen, name):
        return self.spawn(gen, name)

    def _flush(self):
        inst = self.instance
        if inst is None:
            return
        for _ in range(10):
            inst.pump()
            out, inst.outbox = inst.outbox, []
            for m in out:
                self.lpf.post(m)
            if not inst.fired:
                break

    def run(self):
        if self.instance is not None:
            self.instance.check_timeout()
            self._flush()

    def kill(self):
        if self.instance is not None:
            self.instance.close()

    def query(self) -> dict:
        if self.instance is None:
            name = self.definition.name if self.definition else None
            return {"fsm": name, "instance": None, "state": None, "status": "IDLE", "dwell_s": 0.0,
                    "history": [], "fault": None}
        return self.instance.snapshot()

    def do(self, msg):
        b = msg.body
        try:
            if msg.verb == "FsmLoad":
                text = b.get("text") or load_definition_text(str(b["definition"]))
                defn = self.load_definition(text)
                return [msg.reply("FsmLoaded", {"fsm": defn.name, "states": len(defn.states),
                                                "transitions": defn.transition_count})]
            if msg.verb == "FsmStart":
                inst = self.start_instance(b.get("run_config"))
                return [msg.reply("FsmStarted", inst.snapshot())]
            if msg.verb == "FsmTransition":
                if self.instance is None:
                    raise NotRunning("no FSM instance started")
                res = self.instance.step(str(b["transition"]), b.get("payload"))
                self._flush()
                if not res.ok:
                    return [error_reply(msg, res.error, res.text, state=self.instance.current_state)]
                return [msg.reply("FsmStepped", res.to_dict())]
            if msg.verb == "FsmQuery":
                return [msg.reply("FsmState", self.query())]
            if msg.verb == "FsmTrace":
                trace = self.instance.normalized_trace() if self.instance else []
                return [msg.reply("FsmTraceAnswer", {"trace": [list(t) for t in trace]})]
        except FsmError as exc:
            return [error_reply(msg, exc.kind, str(exc))]
        except (OSError, KeyError, TypeError, ValueError) as exc:
            return [error_reply(msg, "BadRequest", str(exc))]
        inst = self.instance
        if inst is not None and inst.current_state is not None:
            handler = getattr(inst.states[inst.current_state], "on_message", None)
            if callable(handler):
                try:
                    replies = handler(msg)
                except Exception as exc:
                    inst._fail("HookFault", f"state {inst.current_state} raised on {msg.verb}: {exc}", msg.verb)
                    replies = None
                self._flush()
                return replies
        return None  # notifications nobody in the current state cares about
