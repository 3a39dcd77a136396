from __future__ import annotations

import random
import time

import pytest
from hypothesis import given, settings, strategies as st

from lpfarm.fsm.dsl import (START, DuplicateBinding, FsmError, FsmSyntaxError, MissingBegin, MissingFsmName,
                            format_fsm, parse_fsm, validate_fsm)
from lpfarm.fsm.engine import (FAULT, FAULTED, FINISHED, IGNORE, READY, RUNNING, FsmState, NotRunning,
                               ValidationRequired, instantiate_fsm, state_registry)
from lpfarm.fsm.host import DEFS_DIR, load_definition_text
from lpfarm.lpf.clock import SimClock
from lpfarm.lpf.core import ModuleSpec
from lpfarm.lpf.message import Address

from helpers import ask

SHIPPED = ("NodeProcessing", "RunProcessing", "Scale40")


class Hooked(FsmState):
    """Records every hook into the instance memory; ``go`` goes where the payload says."""

    def enter(self, payload):
        self.memory.setdefault("log", []).append(("entry", self.state_name))

    def leave(self, payload):
        self.memory.setdefault("log", []).append(("exit", self.state_name))

    def go(self, payload):
        self.memory.setdefault("log", []).append(("action", self.state_name))
        return payload["to"]

    def boom(self, payload):
        raise RuntimeError("kaboom")

    def read_run(self, payload):
        self.memory["seen_run"] = self.config.get("run_id")
        return self.state_name


def registry():
    reg = dict(state_registry())
    reg["Hooked"] = Hooked
    return reg


LINEAR = """\
FSM: Linear
begin: A
state: A isA: Hooked
state: A onExit: leave
state: A onTransition: next do: go
state: B isA: Hooked
state: B onEntry: enter
state: B onExit: leave
state: B onTransition: next do: go
state: C isA: Hooked
state: C onEntry: enter
"""


# -- parsing ------------------------------------------------------------------

def test_trivial_definition():
    d = parse_fsm("FSM: T\nbegin: A\nstate: A isA: Terminal\n")
    assert d.name == "T" and d.begin_state == "A" and list(d.states) == ["A"]
    assert d.states["A"].impl_name == "Terminal"


def test_timeout_clause():
    d = parse_fsm("FSM: T\nbegin: RunElf\nstate: RunElf isA: Terminal\nstate: RunElf timeout: 3600\n")
    assert d.states["RunElf"].timeout_s == 3600


def test_comments_blank_lines_and_merging():
    d = parse_fsm("# header\n\nFSM: T   # trailing\nbegin: A\n\nstate: A isA: Scripted\n"
                  "state: A onTransition: go do: goto_B\nstate: A onEntry: enter\nstate: B isA: Terminal\n")
    a = d.states["A"]
    assert (a.impl_name, a.on_entry, a.transitions) == ("Scripted", "enter", {"go": "goto_B"})


@pytest.mark.parametrize("text,err,line", [
    ("FSM: T\nbegin: A\nstate: A isa: Terminal\n", FsmSyntaxError, 3),
    ("FSM: T\nbegin: A\nhello world\n", FsmSyntaxError, 3),
    ("FSM: T\nbegin: A\nstate: A timeout: soon\n", FsmSyntaxError, 3),
    ("FSM: T\nbegin: A\nstate: A isA: X\nstate: A isA: Y\n", DuplicateBinding, 4),
    ("FSM: T\nbegin: A\nstate: A onTransition: t do: m1\nstate: A onTransition: t do: m2\n", DuplicateBinding, 4),
    ("FSM: T\nFSM: U\n", DuplicateBinding, 2),
    ("begin: A\nstate: A isA: Terminal\n", MissingFsmName, None),
    ("FSM: T\nstate: A isA: Terminal\n", MissingBegin, None),
])
def test_parse_errors(text, err, line):
    with pytest.raises(err) as ei:
        parse_fsm(text)
    assert ei.value.line == line
    if line is not None:
        assert f"line {line}" in str(ei.value)


def test_repeated_identical_binding_is_fine():
    d = parse_fsm("FSM: T\nbegin: A\nstate: A isA: Terminal\nstate: A isA: Terminal\n")
    assert d.states["A"].impl_name == "Terminal"


# -- validation ---------------------------------------------------------------

def test_undefined_begin_is_named():
    issues = validate_fsm(parse_fsm("FSM: T\nbegin: Nowhere\nstate: A isA: Terminal\n"))
    assert [i.rule for i in issues] == ["UndefinedBegin"] and "Nowhere" in issues[0].message


def test_unknown_implementation_and_zero_timeout_all_reported():
    d = parse_fsm("FSM: T\nbegin: A\nstate: A isA: NoSuchThing\nstate: B isA: Terminal\nstate: B timeout: 0\n"
                  "state: C onEntry: enter\n")
    rules = sorted(i.rule for i in validate_fsm(d))
    assert rules == ["InvalidTimeout", "MissingImplementation", "UnknownImplementation"]


def test_unknown_method_and_undefined_static_target():
    d = parse_fsm("FSM: T\nbegin: A\nstate: A isA: Scripted\nstate: A onTransition: x do: goto_Zed\n"
                  "state: A onEntry: nosuch\n")
    rules = sorted(i.rule for i in validate_fsm(d))
    assert rules == ["UndefinedTarget", "UnknownMethod"]


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_definitions_valid_and_fast(name):
    text = load_definition_text(name)
    t0 = time.perf_counter()
    d = parse_fsm(text)
    assert validate_fsm(d) == []
    inst = instantiate_fsm(d, {"run_id": 1})
    elapsed = time.perf_counter() - t0
    assert inst.status == READY and elapsed < 0.1


def test_scale_definition_shape():
    d = parse_fsm(load_definition_text("Scale40"))
    assert len(d.states) == 40 and d.transition_count == 80


@pytest.mark.parametrize("name", SHIPPED)
def test_round_trip(name):
    d = parse_fsm(load_definition_text(name))
    assert parse_fsm(format_fsm(d)) == d


def test_node_processing_follows_agent_sequence():
    d = parse_fsm(load_definition_text("NodeProcessing"))
    names = list(d.states)
    for a, b in [("StartElf", "RunElf"), ("RunElf", "CheckLocks"), ("CheckLocks", "GatherOutput")]:
        assert names.index(a) < names.index(b)


# -- instances ----------------------------------------------------------------

def test_isolation_between_instances():
    d = parse_fsm(LINEAR)
    a, b = instantiate_fsm(d, {}, registry=registry()), instantiate_fsm(d, {}, registry=registry())
    assert a.states["A"] is not b.states["A"]
    a.start()
    a.step("next", {"to": "B"})
    a.states["B"].extra = 1
    assert b.trace == [] and b.memory == {} and not hasattr(b.states["B"], "extra")


def test_run_config_visible_to_states():
    d = parse_fsm("FSM: R\nbegin: A\nstate: A isA: Hooked\nstate: A onTransition: look do: read_run\n")
    inst = instantiate_fsm(d, {"run_id": 42}, registry=registry())
    inst.start()
    inst.step("look")
    assert inst.memory["seen_run"] == 42


def test_unvalidated_definition_refused():
    with pytest.raises(ValidationRequired) as ei:
        instantiate_fsm(parse_fsm("FSM: T\nbegin: A\nstate: A isA: Unknown\n"), {})
    assert ei.value.issues[0].rule == "UnknownImplementation"


def test_fresh_instance_and_terminal_start():
    inst = instantiate_fsm(parse_fsm("FSM: T\nbegin: A\nstate: A isA: Terminal\nstate: A onEntry: enter\n"), {})
    assert inst.trace == [] and inst.status == READY
    res = inst.start()
    assert res.to_state == "A" and inst.status == FINISHED
    assert [r.kind for r in inst.trace] == ["entry", "state"]
    assert inst.trace[0].transition == START


def test_hook_order_linear():
    inst = instantiate_fsm(parse_fsm(LINEAR), {}, registry=registry())
    inst.start()
    inst.step("next", {"to": "B"})
    inst.step("next", {"to": "C"})
    assert inst.memory["log"] == [("exit", "A"), ("action", "A"), ("entry", "B"),
                                  ("exit", "B"), ("action", "B"), ("entry", "C")]
    kinds = [(r.kind, r.state) for r in inst.trace if r.kind != "state"]
    assert kinds == [("exit", "A"), ("action", "A"), ("entry", "B"), ("exit", "B"), ("action", "B"),
                     ("entry", "C")]
    assert inst.status == FINISHED and inst.history == ["A", "B", "C"]


def test_undefined_transition_fault_policy():
    alarms = []
    inst = instantiate_fsm(parse_fsm(LINEAR), {}, registry=registry(), on_alarm=lambda l, t: alarms.append((l, t)))
    inst.start()
    res = inst.step("sideways")
    assert not res.ok and res.error == "UndefinedTransition" and inst.status == FAULTED
    assert alarms and "sideways" in alarms[-1][1] and "A" in alarms[-1][1]
    with pytest.raises(NotRunning):
        inst.step("next", {"to": "B"})


def test_undefined_transition_ignore_policy():
    inst = instantiate_fsm(parse_fsm(LINEAR), {}, registry=registry(), policy=IGNORE)
    inst.start()
    res = inst.step("sideways")
    assert not res.ok and inst.status == RUNNING and inst.current_state == "A"
    assert inst.alarms[0][0] == "WARNING"


def test_hook_fault_and_bad_target():
    text = LINEAR + "state: A onTransition: explode do: boom\n"
    inst = instantiate_fsm(parse_fsm(text), {}, registry=registry())
    inst.start()
    assert inst.step("explode").error == "HookFault" and inst.status == FAULTED
    inst = instantiate_fsm(parse_fsm(LINEAR), {}, registry=registry())
    inst.start()
    res = inst.step("next", {"to": "Nowhere"})
    assert res.error == "HookFault" and "Nowhere" in res.text


# -- timeouts -----------------------------------------------------------------

TIMED = """\
FSM: Timed
begin: A
state: A isA: Scripted
state: A onTransition: go do: goto_B
state: A timeout: 10
state: B isA: Scripted
state: B onTransition: go do: goto_A
state: B timeout: 10
state: Idle isA: Scripted
state: Idle onTransition: go do: goto_A
"""


def test_no_timeout_no_alarm():
    clock = SimClock()
    d = parse_fsm(TIMED.replace("begin: A", "begin: Idle"))
    inst = instantiate_fsm(d, {}, clock=clock)
    inst.start()
    clock.advance(1e6)
    assert inst.check_timeout() is None and inst.alarms == []


def test_timeout_fires_once_per_entry():
    clock = SimClock()
    inst = instantiate_fsm(parse_fsm(TIMED), {}, clock=clock)
    inst.start()
    clock.advance(11)
    fired = [inst.check_timeout() for _ in range(100)]
    assert sum(f is not None for f in fired) == 1
    text = next(f for f in fired if f)
    assert "Timed" in text and "A" in text and "11.0" in text
    assert inst.alarms == [("WARNING", text)]
    inst.step("go")
    inst.step("go")  # back in A: a new entry may alarm again
    clock.advance(11)
    assert inst.check_timeout() is not None


def test_transition_resets_dwell():
    clock = SimClock()
    inst = instantiate_fsm(parse_fsm(TIMED), {}, clock=clock)
    inst.start()
    clock.advance(9)
    assert inst.check_timeout() is None
    inst.step("go")
    clock.advance(9)
    assert inst.check_timeout() is None and inst.alarms == []


# -- properties ---------------------------------------------------------------

def _random_definition(rng: random.Random):
    n = rng.randint(2, 8)
    names = [f"S{i}" for i in range(n)]
    lines = ["FSM: Walk", f"begin: {names[0]}"]
    for s in names:
        lines.append(f"state: {s} isA: Scripted")
        if rng.random() < 0.5:
            lines.append(f"state: {s} onEntry: enter")
        if rng.random() < 0.5:
            lines.append(f"state: {s} onExit: leave")
        for k, t in enumerate(rng.sample(names, rng.randint(1, n))):
            lines.append(f"state: {s} onTransition: t{k} do: goto_{t}")
    return parse_fsm("\n".join(lines))


def check_hook_law(defn, trace):
    """Between consecutive state records: [exit?, action, entry?] with hooks present iff bound."""
    groups, cur = [], []
    for r in trace:
        if r.kind == "state":
            groups.append((cur, r))
            cur = []
        else:
            cur.append(r)
    assert cur == []
    first, rest = groups[0], groups[1:]
    begin = defn.states[defn.begin_state]
    assert [r.kind for r in first[0]] == (["entry"] if begin.on_entry else [])
    prev = first[1].state
    for recs, state_rec in rest:
        want = (["exit"] if defn.states[prev].on_exit else []) + ["action"] + \
               (["entry"] if defn.states[state_rec.state].on_entry else [])
        assert [r.kind for r in recs] == want
        assert recs[0].state == prev
        prev = state_rec.state


def test_hook_order_law_on_random_walks():
    rng = random.Random(1234)
    for _ in range(1000):
        d = _random_definition(rng)
        inst = instantiate_fsm(d, {})
        inst.start()
        for _ in range(rng.randint(0, 20)):
            trs = list(d.states[inst.current_state].transitions)
            inst.step(rng.choice(trs))
        check_hook_law(d, inst.trace)


def test_determinism_of_normalized_traces():
    rng = random.Random(9)
    d = _random_definition(rng)
    walk = []
    probe = instantiate_fsm(d, {})
    probe.start()
    for _ in range(30):
        t = rng.choice(list(d.states[probe.current_state].transitions))
        walk.append(t)
        probe.step(t)
    traces = []
    for _ in range(2):
        inst = instantiate_fsm(d, {})
        inst.start()
        for t in walk:
            inst.step(t)
        traces.append(inst.normalized_trace())
    assert traces[0] == traces[1]


_ident = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(
    st.text(max_size=60),
    st.builds(lambda a, b: f"state: {a} isA: {b}", _ident, _ident),
    st.builds(lambda a, b, c: f"state: {a} onTransition: {b} do: {c}", _ident, _ident, _ident),
    st.builds(lambda a, t: f"state: {a} timeout: {t}", _ident, st.floats(allow_nan=True)),
    st.just("FSM: F"), st.just("begin: A"),
), max_size=30))
def test_parser_totality(lines):
    try:
        d = parse_fsm("\n".join(lines))
    except FsmError as exc:
        assert exc.kind in ("SyntaxError", "DuplicateBinding", "MissingFsmName", "MissingBegin")
        return
    validate_fsm(d)
    assert parse_fsm(format_fsm(d)) == d


def test_parser_handles_one_mebibyte_of_noise():
    rng = random.Random(5)
    noise = "".join(chr(rng.randint(0, 0x2FF)) for _ in range(1 << 20))
    with pytest.raises(FsmError):
        parse_fsm(noise)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_round_trip_random_definitions(seed):
    d = _random_definition(random.Random(seed))
    d.states[d.begin_state].timeout_s = 2.5
    assert parse_fsm(format_fsm(d)) == d


# -- hosted in an LPF ---------------------------------------------------------

def test_fsm_host_verbs(driver, make_lpf):
    server = make_lpf("server")
    client = make_lpf("client")
    server.register_module(ModuleSpec("Walker", config={"definition": str(DEFS_DIR) + "/Scale40.fsm"},
                                      impl="FsmHost"))
    dest = Address("Walker", host=server.host, port=server.port)
    q = ask(driver, client, dest, "FsmQuery")
    assert q.verb == "FsmState" and q.body["status"] == "IDLE"
    started = ask(driver, client, dest, "FsmStart", {"run_config": {"run_id": 3}})
    assert started.verb == "FsmStarted" and started.body["state"] == "S00"
    stepped = ask(driver, client, dest, "FsmTransition", {"transition": "next"})
    assert stepped.verb == "FsmStepped" and stepped.body["to"] == "S01"
    bad = ask(driver, client, dest, "FsmTransition", {"transition": "nope"})
    assert bad.verb == "Error" and bad.body["error"] == "UndefinedTransition"
    q = ask(driver, client, dest, "FsmQuery")
    assert q.body["status"] == FAULTED and "dwell_s" in q.body
    # a new start gives a clean instance
    again = ask(driver, client, dest, "FsmStart", {"run_config": {"run_id": 4}})
    assert again.body["history"] == ["S00"] and again.body["instance"] != started.body["instance"]
    tr = ask(driver, client, dest, "FsmTrace")
    assert tr.body["trace"] == [["entry", "S00", START, "enter"], ["state", "S00", START, None]]
    loaded = ask(driver, client, dest, "FsmLoad", {"text": "FSM: T\nbegin: A\nstate: A isA: Terminal\n"})
    assert loaded.verb == "FsmLoaded" and loaded.body["states"] == 1
    rejected = ask(driver, client, dest, "FsmLoad", {"text": "FSM: T\nbegin: A\nstate: A isA: Nope\n"})
    assert rejected.verb == "Error"
