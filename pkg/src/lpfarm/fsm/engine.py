"""FSM interpreter: instances of a parsed definition and their state objects."""
from __future__ import annotations

import importlib
import itertools
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from ..lpf.message import Address, Message
from .dsl import START, FsmDefinition, FsmError, validate_fsm

READY, RUNNING, FINISHED, FAULTED = "READY", "RUNNING", "FINISHED", "FAULTED"
FAULT, IGNORE = "FAULT", "IGNORE"
MAX_PUMP = 1000

_states: dict[str, type] = {}
_PROVIDERS = ("lpfarm.fsm.states", "lpfarm.farm.states")
_loaded = False


def state_impl(name: str):
    """Class decorator registering a state implementation for ``isA:``."""

    def deco(cls):
        _states[name] = cls
        return cls

    return deco


def state_registry() -> dict[str, type]:
    global _loaded
    if not _loaded:
        _loaded = True
        for pkg in _PROVIDERS:
            importlib.import_module(pkg)
    return _states


class ValidationRequired(FsmError):
    kind = "ValidationRequired"

    def __init__(self, issues):
        super().__init__("definition is not valid: " + "; ".join(map(str, issues)))
        self.issues = list(issues)


class UndefinedTransition(FsmError):
    kind = "UndefinedTransition"


class HookFault(FsmError):
    kind = "HookFault"


class NotRunning(FsmError):
    kind = "NotRunning"


class FsmState:
    """Base for state implementations.

    Transition methods take the payload dict and return the next state's
    name. ``TARGETS`` may declare, per method, the states it can lead to so
    that validation can check them ahead of time.
    """

    TARGETS: dict[str, tuple[str, ...]] = {}

    def __init__(self, name: str, fsm: FsmInstance):
        self.state_name = name
        self.fsm = fsm

    @classmethod
    def provides(cls, method: str) -> bool:
        return callable(getattr(cls, method, None))

    @classmethod
    def targets(cls, method: str):
        return cls.TARGETS.get(method)

    @property
    def config(self) -> dict:
        return self.fsm.run_config

    @property
    def memory(self) -> dict:
        """Scratch space shared by the states of one instance (and only that one)."""
        return self.fsm.memory

    def now(self) -> float:
        return self.fsm.now()

    def message(self, verb: str, dest: Address, body: dict | None = None) -> Message:
        return Message(verb, dest, self.fsm.address, dict(body or {}))

    def send(self, msg: Message):
        self.fsm.outbox.append(msg)

    def fire(self, transition: str, payload: dict | None = None):
        """Request a transition once the current step has completed.

        The request is dropped if this state is no longer current by then.
        """
        self.fsm.fired.append((transition, dict(payload or {}), self.state_name))

    def alarm(self, level: str, text: str):
        self.fsm.alarm(level, text)

    def spawn(self, gen, name: str | None = None, keep: bool = False):
        """Run a task while this state stays current (or the whole instance, with ``keep``)."""
        return self.fsm.spawn(gen, name or f"{self.fsm.definition.name}.{self.state_name}", keep)


@dataclass
class TraceRecord:
    kind: str          # exit | action | entry | state | fault
    state: str
    transition: str | None = None
    method: str | None = None
    at: float = 0.0

    def normalized(self) -> tuple:
        return (self.kind, self.state, self.transition, self.method)


@dataclass
class StepResult:
    transition: str
    from_state: str | None
    to_state: str | None
    status: str
    ok: bool = True
    error: str | None = None
    text: str = ""

    def to_dict(self):
        return {"transition": self.transition, "from": self.from_state, "to": self.to_state,
                "status": self.status, "ok": self.ok, "error": self.error, "text": self.text}


_instance_ids = itertools.count(1)


class FsmInstance:
    """One live run of a definition; it owns fresh state objects."""

    def __init__(self, definition: FsmDefinition, run_config: dict | None = None, clock=None,
                 policy: str = FAULT, registry: dict | None = None, address: Address | None = None,
                 on_alarm: Callable[[str, str], None] | None = None, spawner=None, host=None):
        registry = registry if registry is not None else state_registry()
        issues = validate_fsm(definition, registry)
        if issues:
            raise ValidationRequired(issues)
        if policy not in (FAULT, IGNORE):
            raise ValueError(f"undefined-transition policy must be {FAULT} or {IGNORE}")
        self.instance_id = next(_instance_ids)
        self.definition = definition
        self.run_config: dict[str, Any] = dict(run_config or {})
        self.memory: dict[str, Any] = {}
        self.now = clock.now if clock is not None else time.monotonic
        self.policy = policy
        self.address = address or Address(module=definition.name)
        self.on_alarm = on_alarm
        self.spawner = spawner
        self.host = host
        self.states = {name: registry[sd.impl_name](name, self) for name, sd in definition.states.items()}
        self.status = READY
        self.current_state: str | None = None
        self.entered_at: float | None = None
        self.trace: list[TraceRecord] = []
        self.history: list[str] = []
        self.outbox: list[Message] = []
        self.fired: deque = deque()
        self.alarms: list[tuple[str, str]] = []
        self.fault: str | None = None
        self._timeout_alarmed = False
        self._tasks: list = []
        self._kept: list = []

    # -- helpers -----------------------------------------------------------
    def alarm(self, level: str, text: str):
        self.alarms.append((level, text))
        if self.on_alarm is not None:
            self.on_alarm(level, text)

    def spawn(self, gen, name, keep: bool = False):
        """Tasks die with the current state, or with the instance when ``keep``."""
        if self.spawner is None:
            raise RuntimeError("this FSM instance is not hosted; states cannot spawn tasks")
        task = self.spawner(gen, name)
        (self._kept if keep else self._tasks).append(task)
        return task

    def dwell(self, now: float | None = None) -> float:
        if self.entered_at is None:
            return 0.0
        return (self.now() if now is None else now) - self.entered_at

    def normalized_trace(self) -> list[tuple]:
        return [r.normalized() for r in self.trace]

    def _record(self, kind, state, transition=None, method=None):
        self.trace.append(TraceRecord(kind, state, transition, method, self.now()))

    def _fail(self, kind: str, text: str, transition: str) -> StepResult:
        self.status = FAULTED
        self.fault = f"{kind}: {text}"
        self._record("fault", self.current_state or "", transition, kind)
        self._cancel_tasks(everything=True)
        self.alarm("ERROR", f"FSM {self.definition.name}: {text}")
        return StepResult(transition, self.current_state, None, self.status, False, kind, text)

    def _cancel_tasks(self, everything: bool = False):
        doomed = self._tasks + (self._kept if everything else [])
        for t in doomed:
            if not t.done:
                t.cancel()
        self._tasks.clear()
        if everything:
            self._kept.clear()

    def close(self):
        """Stop every task the instance started."""
        self._cancel_tasks(everything=True)

    # -- driving -----------------------------------------------------------
    def start(self, payload: dict | None = None) -> StepResult:
        """The implicit ``__start__`` transition into the begin state."""
        if self.status != READY:
            raise NotRunning(f"FSM {self.definition.name} already started ({self.status})")
        self.status = RUNNING
        return self._enter(self.definition.begin_state, dict(payload or {}), START, None)

    def step(self, transition: str, payload: dict | None = None) -> StepResult:
        payload = dict(payload or {})
        if self.status != RUNNING:
            raise NotRunning(f"FSM {self.definition.name} is {self.status}, cannot take {transition}")
        cur = self.current_state
        sd = self.definition.states[cur]
        method = sd.transitions.get(transition)
        if method is None:
            text = f"transition {transition} is not defined in state {cur}"
            if self.policy == IGNORE:
                self.alarm("WARNING", f"FSM {self.definition.name}: {text} (ignored)")
                return StepResult(transition, cur, cur, self.status, False, "UndefinedTransition", text)
            return self._fail("UndefinedTransition", text, transition)
        obj = self.states[cur]
        try:
            if sd.on_exit:
                self._record("exit", cur, transition, sd.on_exit)
                getattr(obj, sd.on_exit)(payload)
            self._record("action", cur, transition, method)
            nxt = getattr(obj, method)(payload)
        except Exception as exc:
            return self._fail("HookFault", f"state {cur} raised in {transition}: {type(exc).__name__}: {exc}",
                              transition)
        if nxt not in self.definition.states:
            return self._fail("HookFault", f"state {cur} method {method} chose undefined state {nxt!r}",
                              transition)
        self._cancel_tasks()
        return self._enter(nxt, payload, transition, cur)

    def _enter(self, name, payload, transition, came_from) -> StepResult:
        sd = self.definition.states[name]
        self.current_state = name
        self.entered_at = self.now()
        self._timeout_alarmed = False
        try:
            if sd.on_entry:
                self._record("entry", name, transition, sd.on_entry)
                getattr(self.states[name], sd.on_entry)(payload)
        except Exception as exc:
            return self._fail("HookFault", f"state {name} raised on entry: {type(exc).__name__}: {exc}",
                              transition)
        self._record("state", name, transition)
        self.history.append(name)
        if sd.terminal and self.status == RUNNING:
            self.status = FINISHED
            self._cancel_tasks(everything=True)
        return StepResult(transition, came_from, name, self.status)

    def pump(self, limit: int = MAX_PUMP) -> list[StepResult]:
        """Take transitions requested by states via ``fire``."""
        results = []
        while self.fired and self.status == RUNNING and len(results) < limit:
            transition, payload, origin = self.fired.popleft()
            if origin != self.current_state:
                continue  # stale: the state that asked has been left already
            results.append(self.step(transition, payload))
        if self.status != RUNNING:
            self.fired.clear()
        return results

    def check_timeout(self, now: float | None = None) -> str | None:
        """Alarm text when the current state overstayed its timeout (once per entry)."""
        if self.status != RUNNING or self._timeout_alarmed or self.current_state is None:
            return None
        limit = self.definition.states[self.current_state].timeout_s
        if limit is None:
            return None
        dwell = self.dwell(now)
        if dwell <= limit:
            return None
        self._timeout_alarmed = True
        text = (f"FSM {self.definition.name}: state {self.current_state} timeout {limit:g}s exceeded "
                f"(dwell {dwell:.1f}s)")
        self.alarm("WARNING", text)
        hook = getattr(self.states[self.current_state], "on_timeout", None)
        if callable(hook):
            try:
                hook()
            except Exception as exc:
                self._fail("HookFault", f"state {self.current_state} raised in on_timeout: {exc}", "timeout")
        return text

    def snapshot(self, now: float | None = None) -> dict:
        return {"fsm": self.definition.name, "instance": self.instance_id, "state": self.current_state,
                "status": self.status, "dwell_s": round(self.dwell(now), 3), "history": list(self.history),
                "fault": self.fault, "run_config": dict(self.run_config)}


def instantiate_fsm(definition: FsmDefinition, run_config: dict | None = None, **kw) -> FsmInstance:
    return FsmInstance(definition, run_config, **kw)
