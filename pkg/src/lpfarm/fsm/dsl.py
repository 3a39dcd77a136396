"""The FSM description language: a parser with a matching pretty-printer.

One clause per line::

    FSM: NodeProcessing
    begin: Init
    state: Init isA: NpInit
    state: Init onTransition: ready do: proceed
    state: Init onEntry: enter
    state: Init onExit: leave
    state: RunElf timeout: 3600

Blank lines and ``#`` comments are ignored. Clauses for the same state
merge; repeating a clause with a different value is a DuplicateBinding.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

START = "__start__"

_NAME = r"[A-Za-z_][\w.\-]*"
_CLAUSES = [
    ("fsm", re.compile(rf"FSM:\s*({_NAME})")),
    ("begin", re.compile(rf"begin:\s*({_NAME})")),
    ("isA", re.compile(rf"state:\s*({_NAME})\s+isA:\s*({_NAME})")),
    ("onTransition", re.compile(rf"state:\s*({_NAME})\s+onTransition:\s*({_NAME})\s+do:\s*({_NAME})")),
    ("onEntry", re.compile(rf"state:\s*({_NAME})\s+onEntry:\s*({_NAME})")),
    ("onExit", re.compile(rf"state:\s*({_NAME})\s+onExit:\s*({_NAME})")),
    ("timeout", re.compile(rf"state:\s*({_NAME})\s+timeout:\s*(\S+)")),
]


class FsmError(Exception):
    kind = "FsmError"

    def __init__(self, message: str, line: int | None = None, text: str = ""):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}" + (f" [{text}]" if text else ""))
        self.line = line
        self.text = text


class FsmSyntaxError(FsmError):
    kind = "SyntaxError"


class DuplicateBinding(FsmError):
    kind = "DuplicateBinding"


class MissingFsmName(FsmError):
    kind = "MissingFsmName"


class MissingBegin(FsmError):
    kind = "MissingBegin"


@dataclass
class StateDef:
    name: str
    impl_name: str | None = None
    on_entry: str | None = None
    on_exit: str | None = None
    transitions: dict[str, str] = field(default_factory=dict)
    timeout_s: float | None = None

    @property
    def terminal(self) -> bool:
        return not self.transitions and self.timeout_s is None


@dataclass
class FsmDefinition:
    name: str
    begin_state: str
    states: dict[str, StateDef] = field(default_factory=dict)

    def state(self, name: str) -> StateDef:
        return self.states[name]

    @property
    def transition_count(self) -> int:
        return sum(len(s.transitions) for s in self.states.values())


@dataclass
class ValidationIssue:
    rule: str
    state: str | None
    message: str

    def __str__(self):
        return f"{self.rule}: {self.message}"


def _bind(st: StateDef, attr: str, value, lineno: int, line: str):
    old = getattr(st, attr)
    if old is not None and old != value:
        raise DuplicateBinding(f"state {st.name}: {attr} already bound to {old!r}", lineno, line)
    setattr(st, attr, value)


def parse_fsm(text: str) -> FsmDefinition:
    """Parse DSL text; raises an FsmError subclass carrying the line number."""
    name = begin = None
    states: dict[str, StateDef] = {}
    for lineno, raw in enumerate(str(text).splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for kind, rx in _CLAUSES:
            m = rx.fullmatch(line)
            if m:
                break
        else:
            raise FsmSyntaxError("unrecognized clause", lineno, line[:200])
        if kind == "fsm":
            if name is not None and name != m[1]:
                raise DuplicateBinding(f"FSM already named {name!r}", lineno, line)
            name = m[1]
            continue
        if kind == "begin":
            if begin is not None and begin != m[1]:
                raise DuplicateBinding(f"begin already set to {begin!r}", lineno, line)
            begin = m[1]
            continue
        st = states.setdefault(m[1], StateDef(m[1]))
        if kind == "isA":
            _bind(st, "impl_name", m[2], lineno, line)
        elif kind == "onEntry":
            _bind(st, "on_entry", m[2], lineno, line)
        elif kind == "onExit":
            _bind(st, "on_exit", m[2], lineno, line)
        elif kind == "onTransition":
            old = st.transitions.get(m[2])
            if old is not None and old != m[3]:
                raise DuplicateBinding(f"state {st.name}: transition {m[2]} already bound to {old!r}", lineno, line)
            st.transitions[m[2]] = m[3]
        else:
            try:
                seconds = float(m[2])
            except ValueError:
                raise FsmSyntaxError(f"timeout must be a number of seconds, not {m[2]!r}", lineno, line) from None
            if seconds != seconds or seconds in (float("inf"), float("-inf")):
                raise FsmSyntaxError("timeout must be finite", lineno, line)
            _bind(st, "timeout_s", seconds, lineno, line)
    if name is None:
        raise MissingFsmName("no 'FSM:' clause")
    if begin is None:
        raise MissingBegin(f"FSM {name} has no 'begin:' clause")
    return FsmDefinition(name, begin, states)


def validate_fsm(defn: FsmDefinition, registry=None) -> list[ValidationIssue]:
    """Every problem found, in a stable order; an empty list means valid."""
    from . import engine
    registry = registry if registry is not None else engine.state_registry()
    issues: list[ValidationIssue] = []
    if defn.begin_state not in defn.states:
        issues.append(ValidationIssue("UndefinedBegin", defn.begin_state,
                                      f"begin state {defn.begin_state} is not defined"))
    for st in defn.states.values():
        if st.timeout_s is not None and st.timeout_s <= 0:
            issues.append(ValidationIssue("InvalidTimeout", st.name,
                                          f"state {st.name} timeout must be positive, got {st.timeout_s:g}"))
        if st.impl_name is None:
            issues.append(ValidationIssue("MissingImplementation", st.name, f"state {st.name} has no isA clause"))
            continue
        cls = registry.get(st.impl_name)
        if cls is None:
            issues.append(ValidationIssue("UnknownImplementation", st.name,
                                          f"state {st.name}: no state implementation {st.impl_name!r}"))
            continue
        methods = [st.on_entry, st.on_exit, *st.transitions.values()]
        for method in filter(None, methods):
            if not cls.provides(method):
                issues.append(ValidationIssue("UnknownMethod", st.name,
                                              f"state {st.name}: {st.impl_name} has no method {method!r}"))
        for method in st.transitions.values():
            for target in cls.targets(method) or ():
                if target not in defn.states:
                    issues.append(ValidationIssue("UndefinedTarget", st.name,
                                                  f"state {st.name}: {method} leads to undefined state {target}"))
    return issues


def format_fsm(defn: FsmDefinition) -> str:
    """Canonical DSL text; ``parse_fsm(format_fsm(d)) == d``."""
    out = [f"FSM: {defn.name}", f"begin: {defn.begin_state}"]
    for st in defn.states.values():
        out.append("")
        if st.impl_name is not None:
            out.append(f"state: {st.name} isA: {st.impl_name}")
        if st.on_entry is not None:
            out.append(f"state: {st.name} onEntry: {st.on_entry}")
        if st.on_exit is not None:
            out.append(f"state: {st.name} onExit: {st.on_exit}")
        for tr, method in st.transitions.items():
            out.append(f"state: {st.name} onTransition: {tr} do: {method}")
        if st.timeout_s is not None:
            t = st.timeout_s
            out.append(f"state: {st.name} timeout: {int(t) if t == int(t) else repr(t)}")
    return "\n".join(out) + "\n"
