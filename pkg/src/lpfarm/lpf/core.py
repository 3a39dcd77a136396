"""The Lightweight Processing Framework: a single-threaded cooperative loop.

Each iteration follows the classic main_event_loop:

1. poll the network front-end and fire due cron entries;
2. wake tasks whose timers expired;
3. call ``run`` once on every active module and queue what they return;
4. dispatch the queue to destination modules (``do``); answers produced
   during dispatch are kept for the next iteration;
5. flush outbound network buffers.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Iterable

from . import registry
from .clock import WallClock
from .errors import DuplicateName, InitFailure, InvalidPeriod, RemoteUnreachable
from .message import LOCAL, MAX_HOPS, Address, Message, error_reply, new_id
from .tasks import Join, Sleep, Task, Wait, WaitAll, _Group, _JoinWait, _Waiter

ACTIVE = "active"
PASSIVE = "passive"

DISCARD_SILENT = "DISCARD_SILENT"
DISCARD_ALARM = "DISCARD_ALARM"
ACTIVATE_ON_DEMAND = "ACTIVATE_ON_DEMAND"
POLICIES = (DISCARD_SILENT, DISCARD_ALARM, ACTIVATE_ON_DEMAND)

LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "FATAL")
MAX_CONSECUTIVE_FAULTS = 3
IDLE_SLEEP = 0.02


@dataclass
class ModuleSpec:
    name: str
    kind: str | None = None  # None: whatever the implementation class declares
    config: dict[str, Any] = field(default_factory=dict)
    impl: str | type | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("module name must be non-empty")
        if self.kind not in (None, ACTIVE, PASSIVE):
            raise ValueError(f"module kind must be {ACTIVE} or {PASSIVE}, not {self.kind!r}")


class Module:
    """Base class for everything loaded into an LPF.

    ``do`` handles one message and returns answer messages; active modules
    also get ``run`` once per loop iteration. Both return a list of
    messages (or None).
    """

    kind = PASSIVE

    def __init__(self, name: str, lpf: LpfContext):
        self.name = name
        self.lpf = lpf
        self.config: dict[str, Any] = {}

    @property
    def address(self) -> Address:
        return Address(module=self.name)

    def init(self, config: dict[str, Any]):
        pass

    def do(self, msg: Message) -> list[Message] | None:
        return None

    def run(self) -> list[Message] | None:
        return None

    def kill(self):
        pass

    def message(self, verb: str, dest: Address, body: dict | None = None) -> Message:
        return Message(verb=verb, destination=dest, source=self.address, body=body or {})

    def spawn(self, gen, name: str | None = None) -> Task:
        return self.lpf.spawn(gen, name or f"{self.name}.task", owner=self.name)


@dataclass
class Alarm:
    level: str
    origin: str
    text: str
    timestamp: float

    def to_dict(self):
        return {"level": self.level, "origin": self.origin, "text": self.text,
                "timestamp": self.timestamp}


@dataclass
class CronEntry:
    schedule_id: str
    period: float
    next_due: float
    template: Message
    fired: int = 0


@dataclass
class TraceEvent:
    kind: str
    module: str = ""
    detail: str = ""


@dataclass
class IterationTrace:
    index: int
    events: list[TraceEvent] = field(default_factory=list)
    received: int = 0
    delivered: int = 0
    dropped: list[tuple[str, str]] = field(default_factory=list)
    busy: bool = False

    def add(self, kind, module="", detail=""):
        self.events.append(TraceEvent(kind, module, detail))

    def calls(self, kind) -> list[str]:
        return [e.module for e in self.events if e.kind == kind]


class LocalLog:
    """Per-LPF log: ``ISO8601<TAB>LEVEL<TAB>module<TAB>text`` lines."""

    def __init__(self, path: str | None = None, keep: int = 10000):
        from collections import deque
        self.path = path
        self.records: deque[tuple[float, str, str, str]] = deque(maxlen=keep)
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, ts: float, level: str, module: str, text: str):
        self.records.append((ts, level, module, text))
        if self._fh:
            stamp = datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()
            clean = text.replace("\t", " ").replace("\n", " ")
            self._fh.write(f"{stamp}\t{level}\t{module}\t{clean}\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


class LpfContext:
    def __init__(self, name: str = "lpf", host: str | None = None, port: int | None = None,
                 *, marker: str = "", clock=None, policy: str = DISCARD_ALARM,
                 log_path: str | None = None, hook_budget: float = 0.5,
                 config: dict[str, Any] | None = None, core: bool = True):
        if policy not in POLICIES:
            raise ValueError(f"unknown undeliverable policy {policy!r}")
        from ..net.transport import Network

        self.name = name
        self.marker = marker
        self.clock = clock or WallClock()
        self.policy = policy
        self.hook_budget = hook_budget
        self.config: dict[str, Any] = dict(config or {})
        self.net = Network(host, port)
        self.host = host
        self.port = self.net.server.port if self.net.server else None
        self.aliases = {host} if host else set()
        if host in ("127.0.0.1", "localhost"):
            self.aliases |= {"127.0.0.1", "localhost"}
        self.log = LocalLog(log_path)
        self.alarms: list[Alarm] = []
        self.modules: dict[str, Module] = {}
        self.specs: dict[str, ModuleSpec] = {}
        self.module_ids: dict[str, str] = {}
        self.module_configs: dict[str, dict] = {}
        self.faults: dict[str, int] = {}
        self.cron: dict[str, CronEntry] = {}
        self.degraded = False
        self.started_at = self.clock.now()
        self.iterations = 0
        self.stopping = False
        self.stopped = False
        self.stats = {"parse_config": 0}
        self._pending: list[Message] = []
        self._sink: list[Message] | None = None
        self._waiters: dict[str, _Waiter] = {}
        self._waiter_links: dict[str, tuple] = {}
        self._sleepers: list[tuple[float, Task]] = []
        self._joins: set[_JoinWait] = set()
        self._ready: list[tuple[Task, Any, BaseException | None]] = []
        self._tasks: set[Task] = set()
        self.global_services: dict[str, list[str]] = {}
        self._alarm_depth = 0
        self.on_stop: list[Callable[[], None]] = []
        self.driver = None
        if core:
            self.register_module(ModuleSpec("Lpf", PASSIVE), factory=LpfControl)
            from ..config.activation import ConfigurationService
            self.register_module(ModuleSpec("ConfigurationService", PASSIVE), factory=ConfigurationService)

    # -- identity ---------------------------------------------------------
    @property
    def location(self) -> tuple[str, int] | None:
        if self.port is None:
            return None
        return (self.host, self.port)

    def is_local(self, addr: Address) -> bool:
        if addr.host is None:
            return True
        return addr.port == self.port and addr.host in self.aliases

    def address_of(self, module: str) -> Address:
        """Network-visible address of a module hosted here."""
        if self.port is None:
            return Address(module=module)
        return Address(module=module, host=self.host, port=self.port)

    # -- module management ------------------------------------------------
    def register_module(self, spec: ModuleSpec, factory: type | Callable | None = None) -> str:
        if spec.name in self.modules:
            raise DuplicateName(f"module {spec.name!r} already registered in {self.name}")
        if factory is None:
            impl = spec.impl or spec.name
            factory = impl if isinstance(impl, type) else registry.resolve(impl)
        module = factory(spec.name, self)
        if spec.kind is None:
            spec.kind = ACTIVE if getattr(module, "kind", PASSIVE) == ACTIVE else PASSIVE
        module.kind = spec.kind
        module.config = dict(spec.config)
        self.modules[spec.name] = module
        self.specs[spec.name] = spec
        try:
            started = time.perf_counter()
            module.init(module.config)
            self._check_budget(spec.name, "init", started)
        except Exception as exc:
            del self.modules[spec.name]
            del self.specs[spec.name]
            self.alarm("ERROR", f"init of {spec.name} failed: {exc!r}", module=spec.name)
            raise InitFailure(f"init of {spec.name} failed: {exc}") from exc
        module_id = f"{self.name}:{spec.name}:{new_id()}"
        self.module_ids[spec.name] = module_id
        self.faults[spec.name] = 0
        self.log.write(self.clock.now(), "INFO", spec.name, f"loaded ({spec.kind})")
        return module_id

    def load(self, name: str, impl: str | type | None = None, config: dict | None = None,
             kind: str | None = None) -> Module:
        """Convenience wrapper: register and return the module instance."""
        if kind is None:
            cls = impl if isinstance(impl, type) else registry.resolve(impl or name)
            kind = getattr(cls, "kind", PASSIVE)
        self.register_module(ModuleSpec(name, kind, dict(config or {}), impl))
        return self.modules[name]

    def unload_module(self, name: str, reason: str = "unloaded"):
        module = self.modules.pop(name, None)
        if module is None:
            return
        self.specs.pop(name, None)
        self.module_ids.pop(name, None)
        self.faults.pop(name, None)
        for task in [t for t in self._tasks if t.owner == name]:
            task.cancel()
        try:
            module.kill()
        except Exception as exc:
            self.alarm("WARNING", f"kill of {name} raised {exc!r}", module=name)
        self.log.write(self.clock.now(), "INFO", name, reason)

    def activate_module(self, name: str, config: dict | None = None, scope: str = LOCAL,
                        impl: str | type | None = None, domains: Iterable[str] = ()) -> Task:
        """Load a module locally or, for GLOBAL scope, resolve it through naming.

        Returns a task whose result is the loaded module or a transparent proxy.
        """
        from .activator import activate
        return self.spawn(activate(self, name, config or {}, scope, impl, list(domains)),
                          f"activate:{name}", owner=None)

    def active_modules(self) -> list[Module]:
        return [m for m in self.modules.values() if m.kind == ACTIVE]

    # -- messages & tasks ------------------------------------------------
    def post(self, msg: Message):
        """Queue a message for dispatch (next dispatch pass)."""
        (self._sink if self._sink is not None else self._pending).append(msg)

    def spawn(self, gen, name: str = "task", owner: str | None = None) -> Task:
        task = Task(self, gen, name, owner)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        task.step()
        return task

    def _forget_task(self, task: Task):
        for mid in [k for k, w in self._waiters.items() if w.task is task]:
            del self._waiters[mid]
            self._waiter_links.pop(mid, None)
        self._sleepers = [(d, t) for d, t in self._sleepers if t is not task]
        for j in [j for j in self._joins if j.task is task]:
            self._joins.discard(j)
        self._ready = [r for r in self._ready if r[0] is not task]

    def _deadline(self, timeout):
        return None if timeout is None else self.clock.now() + timeout

    def _park(self, task: Task, request):
        """Register what ``task`` waits for; returns (value, exc) if already satisfied."""
        if isinstance(request, Wait):
            self._waiters[request.message.id] = _Waiter(task, self._deadline(request.timeout))
            self.post(request.message)
            return None
        if isinstance(request, WaitAll):
            if not request.messages:
                return ([], None)
            group = _Group(task, [m.id for m in request.messages],
                           deadline=self._deadline(request.timeout))
            for m in request.messages:
                self._waiters[m.id] = _Waiter(task, group.deadline, group)
                self.post(m)
            return None
        if isinstance(request, Sleep):
            self._sleepers.append((self.clock.now() + max(0.0, request.seconds), task))
            return None
        if isinstance(request, Task):
            if request.done:
                return (request.result, request.error)
            request.add_done_callback(lambda t: self._resume_later(task, t.result, t.error))
            return None
        if isinstance(request, Join):
            jw = _JoinWait(self, task, list(request.tasks), self._deadline(request.timeout))
            if not jw.pending():
                return ([], None)
            self._joins.add(jw)
            for t in jw.pending():
                t._joiners.append(jw)
            return None
        return (None, TypeError(f"task yielded unsupported request {request!r}"))

    def _resume_later(self, task: Task, value=None, exc=None):
        self._ready.append((task, value, exc))

    def _run_ready(self) -> bool:
        ran = False
        while self._ready:
            batch, self._ready = self._ready, []
            for task, value, exc in batch:
                if not task.done:
                    ran = True
                    task.step(value, exc)
        return ran

    def _answer_waiter(self, msg: Message) -> bool:
        waiter = self._waiters.pop(msg.correlation_id, None)
        if waiter is None:
            return False
        self._waiter_links.pop(msg.correlation_id, None)
        group = waiter.group
        if group is None:
            self._resume_later(waiter.task, msg)
        else:
            group.answers[msg.correlation_id] = msg
            if group.complete():
                self._resume_later(group.task, group.result())
        return True

    def _expire_timers(self) -> bool:
        now = self.clock.now()
        woke = False
        groups_done = set()
        for mid, w in list(self._waiters.items()):
            if w.deadline is not None and now >= w.deadline:
                del self._waiters[mid]
                self._waiter_links.pop(mid, None)
                if w.group is None:
                    self._resume_later(w.task, None)
                elif id(w.group) not in groups_done:
                    groups_done.add(id(w.group))
                    for other in w.group.ids:
                        self._waiters.pop(other, None)
                    self._resume_later(w.group.task, w.group.result())
                woke = True
        if self._sleepers:
            due = [(d, t) for d, t in self._sleepers if d <= now]
            if due:
                self._sleepers = [(d, t) for d, t in self._sleepers if d > now]
                for _, t in due:
                    self._resume_later(t, None)
                woke = True
        for jw in list(self._joins):
            if jw.deadline is not None and now >= jw.deadline:
                jw.fire()
                woke = True
        return woke

    def request(self, msg: Message, timeout: float | None = None) -> Task:
        """Send ``msg`` and return a task resolving to its answer (or None)."""

        def _req():
            return (yield Wait(msg, timeout))

        return self.spawn(_req(), f"request:{msg.verb}")

    # -- cron ---------------------------------------------------------------
    def schedule_cron(self, period_s: float, template: Message) -> str:
        if not period_s or period_s <= 0:
            raise InvalidPeriod(f"cron period must be positive, got {period_s!r}")
        sid = f"cron-{new_id()}"
        self.cron[sid] = CronEntry(sid, float(period_s), self.clock.now() + period_s, template)
        return sid

    def cancel_cron(self, schedule_id: str) -> bool:
        return self.cron.pop(schedule_id, None) is not None

    def _fire_cron(self) -> list[Message]:
        now = self.clock.now()
        out = []
        for entry in list(self.cron.values()):
            while entry.next_due <= now and entry.schedule_id in self.cron:
                out.append(entry.template.copy(id=new_id()))
                entry.fired += 1
                entry.next_due += entry.period
        return out

    # -- alarms & logging ---------------------------------------------------
    def alarm(self, level: str, text: str, module: str = "Lpf"):
        self.raise_alarm(Alarm(level, module, text, self.clock.now()))

    def raise_alarm(self, alarm: Alarm):
        try:
            self.alarms.append(alarm)
            self.log.write(alarm.timestamp, alarm.level, alarm.origin, alarm.text)
            if alarm.level == "FATAL":
                self.degraded = True
            handler = self.config.get("alarm_handler", "AlarmHandler")
            if (handler in self.modules and alarm.origin != handler
                    and self._alarm_depth == 0 and not self.stopped):
                self._alarm_depth += 1
                try:
                    body = alarm.to_dict()
                    body["lpf"] = self.name
                    self.post(Message("Alarm", Address(module=handler),
                                      Address(module=alarm.origin or "Lpf"), body))
                finally:
                    self._alarm_depth -= 1
        except Exception:
            # Alarm handling never fails outward.
            pass

    def info(self, text: str, module: str = "Lpf"):
        self.log.write(self.clock.now(), "INFO", module, text)

    # -- hooks --------------------------------------------------------------
    def _check_budget(self, name, hook, started):
        spent = time.perf_counter() - started
        if spent > self.hook_budget:
            self.alarm("WARNING", f"{hook} of {name} took {spent * 1000:.0f} ms "
                       f"(budget {self.hook_budget * 1000:.0f} ms)", module=name)

    def _call_hook(self, module: Module, hook: str, *args) -> list[Message]:
        started = time.perf_counter()
        try:
            out = getattr(module, hook)(*args)
        except Exception as exc:
            self._fault(module, hook, exc)
            return []
        finally:
            self._check_budget(module.name, hook, started)
        if module.name in self.faults:
            self.faults[module.name] = 0
        if out is None:
            return []
        if isinstance(out, Message):
            return [out]
        return list(out)

    def _fault(self, module: Module, hook: str, exc: Exception):
        name = module.name
        self.alarm("ERROR", f"{hook} of {name} raised {exc!r}", module=name)
        if name not in self.faults:
            return
        self.faults[name] += 1
        if self.faults[name] >= MAX_CONSECUTIVE_FAULTS:
            self.alarm("WARNING", f"{name} unloaded after {MAX_CONSECUTIVE_FAULTS} consecutive faults",
                       module="Lpf")
            self.unload_module(name, reason="faulty, unloaded")

    # -- dispatch -----------------------------------------------------------
    def dispatch(self, queue: list[Message], trace: IterationTrace | None = None) -> list[Message]:
        """Deliver every message in ``queue``; returns the answers they produced."""
        trace = trace or IterationTrace(self.iterations)
        answers: list[Message] = []
        outer_sink, self._sink = self._sink, answers
        try:
            for m in queue:
                trace.received += 1
                cause = self._route(m, trace)
                if cause is None:
                    trace.delivered += 1
                else:
                    trace.dropped.append((m.id, cause))
                self._run_ready()
        finally:
            self._sink = outer_sink
        return answers

    def _drop(self, m: Message, cause: str, level: str | None = "WARNING", text: str = "") -> str:
        if level and m.verb != "Alarm":
            self.alarm(level, text or f"{cause}: dropped {m!r}", module="InterModuleCommunication")
        else:
            self.log.write(self.clock.now(), "DEBUG", "InterModuleCommunication", f"{cause}: dropped {m!r}")
        return cause

    def _route(self, m: Message, trace: IterationTrace) -> str | None:
        if m.hop_count > MAX_HOPS:
            return self._drop(m, "LoopGuard", "WARNING", f"hop limit exceeded by {m!r}")
        cid = m.correlation_id
        if cid is not None:
            if self._answer_waiter(m):
                trace.add("resume", m.destination.module, m.verb)
                return None
            server = self.net.server
            if server is not None and server.owns(cid):
                from ..net.transport import StaleRoute
                try:
                    server.route_answer(m)
                    trace.add("reply", m.destination.module, m.verb)
                    return None
                except StaleRoute as exc:
                    return self._drop(m, "StaleRoute", "WARNING", f"StaleRoute: {exc}")
        dest = m.destination
        if not self.is_local(dest):
            return self.forward(m, trace)
        target = self.modules.get(dest.module)
        if target is None and dest.service:
            target = self.modules.get(dest.service)
        if target is not None:
            trace.add("do", target.name, m.verb)
            self.post_all(self._call_hook(target, "do", m))
            return None
        if dest.service and dest.domain != LOCAL:
            return self._resolve_and_deliver(m, trace)
        return self._undeliverable_policy(m, trace)

    def post_all(self, msgs: Iterable[Message]):
        for out in msgs:
            self.post(out)

    def _undeliverable_policy(self, m: Message, trace: IterationTrace) -> str | None:
        name = m.destination.module
        if self.policy == ACTIVATE_ON_DEMAND and registry.known(name):
            try:
                self.load(name, config=self.module_configs.get(name, {}))
            except Exception as exc:
                return self._drop(m, "ActivationFailed", "ERROR", f"on-demand activation of {name} failed: {exc}")
            trace.add("activate", name)
            trace.add("do", name, m.verb)
            self.post_all(self._call_hook(self.modules[name], "do", m))
            return None
        cause = "NoReceiver"
        if m.id in self._waiters:
            self._notify_undeliverable(m, f"no module {name} in {self.name}")
            return cause
        if self.policy == DISCARD_SILENT:
            return self._drop(m, cause, None)
        return self._drop(m, cause, "WARNING", f"no receiver {name} for {m!r}")

    def _resolve_and_deliver(self, m: Message, trace: IterationTrace) -> str | None:
        """Service-addressed message with no local stand-in: look it up, then proxy it."""
        from .activator import GLOBAL, activate
        name = m.destination.service
        task = self.spawn(activate(self, name, {}, GLOBAL, None, [m.destination.domain], remote_only=True),
                          f"resolve:{name}")
        trace.add("resolve", name, m.verb)

        def deliver(t: Task):
            if t.error is not None or name not in self.modules:
                self._undeliverable(m, f"UnroutableMessage: cannot resolve {name}@{m.destination.domain}: {t.error}")
            else:
                self.post(m)

        task.add_done_callback(deliver)
        return None

    def outbound(self, m: Message, dest: Address | None = None) -> Message:
        """Copy of ``m`` ready to leave this LPF: source stamped, hop counted."""
        source = m.source
        if source.host is None and self.port is not None:
            source = source.at(self.host, self.port)
        return m.copy(source=source, destination=dest or m.destination, hop_count=m.hop_count + 1)

    def track_link(self, message_id: str, key):
        if message_id in self._waiters:
            self._waiter_links[message_id] = key

    def forward(self, m: Message, trace: IterationTrace | None = None) -> str | None:
        fwd = self.outbound(m)
        if fwd.hop_count > MAX_HOPS:
            return self._drop(m, "LoopGuard", "WARNING", f"hop limit exceeded by {m!r}")
        try:
            key, _ = self.net.send(fwd)
        except RemoteUnreachable as exc:
            return self._undeliverable(m, f"RemoteUnreachable: {exc}")
        except Exception as exc:
            return self._undeliverable(m, f"UnroutableMessage: {exc}")
        self.track_link(m.id, key)
        if trace is not None:
            trace.add("forward", m.destination.module, f"{m.verb} -> {key[0]}:{key[1]}")
        return None

    def _notify_undeliverable(self, m: Message, cause: str):
        notice = Message("Undeliverable", m.source, Address(module="Lpf"),
                         {"cause": cause, "verb": m.verb}, correlation_id=m.id)
        self._answer_waiter(notice)

    def _undeliverable(self, m: Message, cause: str) -> str:
        kind = cause.split(":", 1)[0]
        if m.id in self._waiters:
            self._notify_undeliverable(m, cause)
            self.log.write(self.clock.now(), "INFO", "InterModuleCommunication", f"{cause} ({m.verb})")
            return kind
        return self._drop(m, kind, "ERROR", f"{cause} for {m!r}")

    # -- the loop -----------------------------------------------------------
    def loop_iteration(self) -> IterationTrace:
        self.iterations += 1
        trace = IterationTrace(self.iterations)
        incoming = self.net.poll()
        trace.add("poll", detail=str(len(incoming)))
        for key, _link in self.net.links.take_lost():
            for mid, k in list(self._waiter_links.items()):
                if k == key and mid in self._waiters:
                    w = self._waiters[mid]
                    notice = Message("Undeliverable", Address(module=w.task.owner or "Lpf"),
                                     Address(module="Lpf"),
                                     {"cause": f"connection to {key[0]}:{key[1]} lost"},
                                     correlation_id=mid)
                    self._answer_waiter(notice)
        fired = self._fire_cron()
        trace.add("cron", detail=str(len(fired)))
        woke = self._expire_timers()
        woke = self._run_ready() or woke
        queue, self._pending = self._pending, []
        queue.extend(incoming)
        queue.extend(fired)
        for module in self.active_modules():
            if module.name not in self.modules:
                continue
            trace.add("run", module.name)
            queue.extend(self._call_hook(module, "run"))
        answers = self.dispatch(queue, trace)
        self._pending[:0] = answers
        woke = self._run_ready() or woke
        self.net.flush()
        trace.busy = bool(queue or self._pending or woke or incoming)
        if self.stopping and not self.stopped:
            self._shutdown()
        return trace

    def run(self, until: Callable[[], bool] | None = None, timeout: float | None = None,
            idle_sleep: float = IDLE_SLEEP):
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.stopped:
            if until is not None and until():
                return True
            if deadline is not None and time.monotonic() > deadline:
                return False
            trace = self.loop_iteration()
            if not trace.busy and not self.stopped:
                self.net.wait(idle_sleep)
        return until() if until is not None else True

    # -- lifecycle ------------------------------------------------------------
    def stop(self):
        """Request the self-destruction sequence at the end of this iteration."""
        self.stopping = True

    def _shutdown(self):
        for name in reversed(list(self.modules)):
            self.unload_module(name, reason="stopped")
        for task in list(self._tasks):
            task.cancel()
        deadline = time.monotonic() + 1.0
        while self.net.pending_output() and time.monotonic() < deadline:
            self.net.flush()
            time.sleep(0.001)
        self.net.close()
        self.stopped = True
        self.log.write(self.clock.now(), "INFO", "Lpf", "exited main loop")
        self.log.close()
        for fn in self.on_stop:
            try:
                fn()
            except Exception:
                pass

    def status(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "host": self.host,
            "port": self.port,
            "marker": self.marker,
            "pid": os.getpid(),
            "uptime": self.clock.now() - self.started_at,
            "modules": sorted(self.modules),
            "queue_depth": len(self._pending),
            "degraded": self.degraded,
            "iterations": self.iterations,
            "stats": dict(self.stats),
        }


class LpfControl(Module):
    """Core module answering status queries and the stop request."""

    def do(self, msg):
        lpf = self.lpf
        if msg.verb in ("LpfStatus", "Ping"):
            return [msg.reply("LpfStatusAnswer" if msg.verb == "LpfStatus" else "Pong", lpf.status())]
        if msg.verb == "StopLocalLpf":
            lpf.info(f"StopLocalLpf from {msg.source}", module=self.name)
            lpf.stop()
            return [msg.reply("Stopping", {"name": lpf.name, "pid": os.getpid()})]
        if msg.verb == "LoadModule":
            try:
                lpf.load(msg.body["name"], msg.body.get("impl"), msg.body.get("config"))
            except Exception as exc:
                return [error_reply(msg, type(exc).__name__, str(exc))]
            return [msg.reply("Loaded", {"name": msg.body["name"]})]
        if msg.verb == "UnloadModule":
            lpf.unload_module(msg.body["name"])
            return [msg.reply("Unloaded", {"name": msg.body["name"]})]
        if msg.verb == "Alarms":
            return [msg.reply("AlarmList", {"alarms": [a.to_dict() for a in lpf.alarms[-200:]]})]
        return [error_reply(msg, "UnknownVerb", msg.verb)]


registry.module_type("Lpf")(LpfControl)
