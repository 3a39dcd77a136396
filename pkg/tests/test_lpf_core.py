from __future__ import annotations

import pytest

from lpfarm.lpf.core import (
    ACTIVATE_ON_DEMAND, ACTIVE, DISCARD_ALARM, DISCARD_SILENT, PASSIVE, Alarm, LpfContext, Module,
    ModuleSpec,
)
from lpfarm.lpf.errors import DuplicateName, InitFailure, InvalidPeriod
from lpfarm.lpf.message import MAX_HOPS, Address, Message
from lpfarm.lpf.tasks import Sleep, Wait
from lpfarm.lpf.testing import Chatter, Echo, Faulty, Recorder


def bare(clock=None, **kw):
    return LpfContext("t", clock=clock, **kw)


def msg(verb, to, frm="tester", **body):
    return Message(verb, Address(module=to), Address(module=frm), body)


class CountingInit(Module):
    def init(self, config):
        self.init_calls = getattr(self, "init_calls", 0) + 1
        self.config_seen = dict(config)


def test_register_calls_init_once_with_config():
    lpf = bare()
    mid = lpf.register_module(ModuleSpec("imc", ACTIVE, {"a": 1}), factory=CountingInit)
    assert mid
    m = lpf.modules["imc"]
    assert m.init_calls == 1
    assert m.config_seen == {"a": 1}


def test_duplicate_registration_rejected_and_lpf_unchanged():
    lpf = bare()
    lpf.register_module(ModuleSpec("imc", ACTIVE), factory=Recorder)
    before = lpf.modules["imc"]
    with pytest.raises(DuplicateName):
        lpf.register_module(ModuleSpec("imc", PASSIVE), factory=Echo)
    assert lpf.modules["imc"] is before
    assert lpf.modules["imc"].kind == ACTIVE


def test_init_failure_removes_module_and_alarms():
    lpf = bare()
    with pytest.raises(InitFailure):
        lpf.register_module(ModuleSpec("bad", PASSIVE, {"fail_init": True}), factory=Faulty)
    assert "bad" not in lpf.modules
    assert [a.level for a in lpf.alarms] == ["ERROR"]


def test_empty_name_rejected():
    with pytest.raises(ValueError):
        ModuleSpec("", PASSIVE)


def test_passive_module_gets_do_but_never_run():
    lpf = bare()
    lpf.register_module(ModuleSpec("p", PASSIVE), factory=Recorder)
    lpf.post(msg("Hi", "p"))
    for _ in range(100):
        lpf.loop_iteration()
    rec = lpf.modules["p"]
    assert len(rec.received) == 1
    assert rec.runs == 0


def test_active_module_runs_once_per_iteration():
    lpf = bare()
    lpf.register_module(ModuleSpec("a", ACTIVE), factory=Recorder)
    for _ in range(7):
        trace = lpf.loop_iteration()
        assert trace.calls("run") == ["a"]
    assert lpf.modules["a"].runs == 7


def test_empty_system_trace_has_only_housekeeping():
    lpf = bare(core=False)
    trace = lpf.loop_iteration()
    assert {e.kind for e in trace.events} == {"poll", "cron"}
    assert lpf._pending == []


def test_two_active_modules_exchange_in_one_iteration():
    lpf = bare()
    lpf.register_module(ModuleSpec("a", ACTIVE, {"peer": "b"}), factory=Chatter)
    lpf.register_module(ModuleSpec("b", ACTIVE, {"peer": "a"}), factory=Chatter)
    trace = lpf.loop_iteration()
    assert trace.calls("run") == ["a", "b"]
    assert trace.calls("do") == ["b", "a"]
    assert len(lpf.modules["a"].received) == 1
    assert len(lpf.modules["b"].received) == 1
    # Hooks form a total order: runs first, then deliveries.
    kinds = [e.kind for e in trace.events if e.kind in ("run", "do")]
    assert kinds == ["run", "run", "do", "do"]


def test_faulty_module_unloaded_after_three_faults():
    lpf = bare()
    lpf.register_module(ModuleSpec("f", PASSIVE), factory=Faulty)
    for _ in range(5):
        lpf.post(msg("Boom", "f"))
        lpf.loop_iteration()
    assert "f" not in lpf.modules
    errors = [a for a in lpf.alarms if a.level == "ERROR" and a.origin == "f"]
    assert len(errors) == 3
    assert not any(a.level == "FATAL" for a in lpf.alarms)
    # the loop keeps going
    lpf.register_module(ModuleSpec("r", PASSIVE), factory=Recorder)
    lpf.post(msg("Hi", "r"))
    lpf.loop_iteration()
    assert len(lpf.modules["r"].received) == 1


def test_fault_counter_resets_after_success():
    class Flaky(Module):
        def init(self, config):
            self.n = 0

        def do(self, m):
            self.n += 1
            if self.n % 3:
                raise RuntimeError("flaky")

    lpf = bare()
    lpf.register_module(ModuleSpec("f", PASSIVE), factory=Flaky)
    for _ in range(9):
        lpf.post(msg("X", "f"))
        lpf.loop_iteration()
    assert "f" in lpf.modules


def test_dispatch_empty_queue():
    assert bare().dispatch([]) == []


def test_answers_are_deferred_to_next_iteration():
    lpf = bare()
    lpf.register_module(ModuleSpec("echo", PASSIVE), factory=Echo)
    lpf.register_module(ModuleSpec("rec", PASSIVE), factory=Recorder)
    q = Message("Ping", Address(module="echo"), Address(module="rec"))
    answers = lpf.dispatch([q])
    assert [a.verb for a in answers] == ["Echoed"]
    assert lpf.modules["rec"].received == []
    lpf._pending.extend(answers)
    lpf.loop_iteration()
    assert [m.correlation_id for m in lpf.modules["rec"].received] == [q.id]


def test_undeliverable_discard_alarm_vs_activate_on_demand():
    lpf = bare(policy=DISCARD_ALARM)
    trace = lpf.loop_iteration()
    lpf.post(msg("Hi", "Recorder"))
    trace = lpf.loop_iteration()
    assert trace.dropped and trace.dropped[0][1] == "NoReceiver"
    assert len([a for a in lpf.alarms if a.level == "WARNING"]) == 1
    assert "Recorder" not in lpf.modules

    lpf = bare(policy=ACTIVATE_ON_DEMAND)
    lpf.post(msg("Hi", "Recorder"))
    trace = lpf.loop_iteration()
    assert "Recorder" in lpf.modules
    assert len(lpf.modules["Recorder"].received) == 1
    assert trace.delivered == 1 and not trace.dropped


def test_discard_silent_raises_no_alarm():
    lpf = bare(policy=DISCARD_SILENT)
    lpf.post(msg("Hi", "nobody"))
    trace = lpf.loop_iteration()
    assert trace.dropped and lpf.alarms == []


def test_message_conservation_per_iteration():
    lpf = bare()
    lpf.register_module(ModuleSpec("r", PASSIVE), factory=Recorder)
    for i in range(10):
        lpf.post(msg("X", "r" if i % 3 else "ghost"))
    lpf.post(msg("Loop", "r").copy(hop_count=MAX_HOPS + 1))
    trace = lpf.loop_iteration()
    assert trace.received == 11
    assert trace.received == trace.delivered + len(trace.dropped)
    assert {c for _, c in trace.dropped} == {"NoReceiver", "LoopGuard"}


def test_hook_budget_warning_names_module():
    lpf = bare(hook_budget=0.05)
    lpf.register_module(ModuleSpec("slow", PASSIVE, {"delay": 0.08}, impl="Slow"))
    lpf.post(msg("Go", "slow"))
    lpf.loop_iteration()
    warn = [a for a in lpf.alarms if a.level == "WARNING"]
    assert len(warn) == 1 and warn[0].origin == "slow"


def test_kill_leaves_lpf_working():
    lpf = bare()
    lpf.register_module(ModuleSpec("a", ACTIVE), factory=Recorder)
    lpf.unload_module("a")
    lpf.loop_iteration()
    assert "a" not in lpf.modules


# -- cron ------------------------------------------------------------------

def run_sim(lpf, clock, seconds, step=0.1):
    for _ in range(round(seconds / step)):
        clock.advance(step)
        lpf.loop_iteration()


def test_cron_fires_once_per_period(clock):
    lpf = bare(clock)
    lpf.register_module(ModuleSpec("r", PASSIVE), factory=Recorder)
    lpf.schedule_cron(1.0, msg("Tick", "r"))
    run_sim(lpf, clock, 3.5)
    ticks = lpf.modules["r"].received
    assert len(ticks) == 3
    assert len({t.id for t in ticks}) == 3


def test_cron_cancel_after_first_firing(clock):
    lpf = bare(clock)
    lpf.register_module(ModuleSpec("r", PASSIVE), factory=Recorder)
    sid = lpf.schedule_cron(1.0, msg("Tick", "r"))
    run_sim(lpf, clock, 1.5)
    assert lpf.cancel_cron(sid)
    run_sim(lpf, clock, 5)
    assert len(lpf.modules["r"].received) == 1


def test_cron_next_due_strictly_increases(clock):
    lpf = bare(clock)
    sid = lpf.schedule_cron(0.5, msg("Tick", "Lpf"))
    seen = []
    for _ in range(10):
        clock.advance(0.3)
        lpf.loop_iteration()
        seen.append(lpf.cron[sid].next_due)
    assert all(b >= a for a, b in zip(seen, seen[1:]))
    assert seen[-1] > seen[0]


@pytest.mark.parametrize("period", [0, -1])
def test_cron_invalid_period(period):
    with pytest.raises(InvalidPeriod):
        bare().schedule_cron(period, msg("Tick", "r"))


# -- alarms ----------------------------------------------------------------

def test_warning_without_handler_goes_to_local_log(tmp_path):
    log = tmp_path / "lpf.log"
    lpf = bare(log_path=str(log))
    lpf.alarm("WARNING", "disk almost full", module="stager")
    lpf.loop_iteration()
    lines = [l.split("\t") for l in log.read_text().splitlines()]
    hit = [l for l in lines if l[1] == "WARNING"]
    assert len(hit) == 1
    assert hit[0][2:] == ["stager", "disk almost full"]
    assert "T" in hit[0][0]


def test_fatal_marks_degraded():
    lpf = bare()
    assert lpf.status()["degraded"] is False
    lpf.raise_alarm(Alarm("FATAL", "x", "broken", 0.0))
    assert lpf.status()["degraded"] is True


def test_local_alarm_handler_receives_copy():
    lpf = bare()
    lpf.register_module(ModuleSpec("AlarmHandler", PASSIVE), factory=Recorder)
    lpf.alarm("ERROR", "oops", module="x")
    lpf.loop_iteration()
    got = lpf.modules["AlarmHandler"].received
    assert len(got) == 1 and got[0].body["text"] == "oops"


def test_alarm_handler_on_remote_lpf(make_lpf, driver):
    a = make_lpf("a")
    b = make_lpf("b")
    b.register_module(ModuleSpec("AlarmHandler", PASSIVE), factory=Recorder)
    from lpfarm.net.proxy import Proxy
    a.register_module(ModuleSpec("AlarmHandler", PASSIVE,
                                 {"service": "AlarmHandler", "host": b.host, "port": b.port}),
                      factory=Proxy)
    a.alarm("ERROR", "remote oops", module="x")
    handler = b.modules["AlarmHandler"]
    assert driver.run_until(lambda: handler.received, 3)
    driver.run_for(0.2)
    assert len(handler.received) == 1
    assert handler.received[0].hop_count == 1


def test_status_query_verb():
    lpf = bare()
    lpf.register_module(ModuleSpec("r", PASSIVE), factory=Recorder)
    lpf.post(Message("LpfStatus", Address(module="Lpf"), Address(module="r")))
    lpf.loop_iteration()
    lpf.loop_iteration()
    ans = lpf.modules["r"].received[0]
    assert ans.verb == "LpfStatusAnswer"
    assert set(ans.body) >= {"uptime", "modules", "queue_depth", "degraded"}
    assert "r" in ans.body["modules"]


# -- tasks -----------------------------------------------------------------

def test_task_wait_gets_answer_and_timeout(clock):
    lpf = bare(clock)
    lpf.register_module(ModuleSpec("echo", PASSIVE), factory=Echo)

    def body():
        a = yield Wait(msg("Ping", "echo", frm="task"), timeout=1)
        b = yield Wait(msg("Ping", "nobody", frm="task"), timeout=1)
        yield Sleep(0.5)
        return a, b

    t = lpf.spawn(body())
    for _ in range(30):
        clock.advance(0.1)
        lpf.loop_iteration()
    a, b = t.value()
    assert a.verb == "Echoed"
    assert b.verb == "Undeliverable"
