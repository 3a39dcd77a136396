"""External process supervision that never blocks the hosting loop.

Children are started with non-blocking pipes; ``poll`` is called once per
loop iteration to drain whatever output is available, reap exits, notice
stops/continues and enforce runtime limits. Every state change becomes one
event dict handed to ``on_event``.
"""
from __future__ import annotations

import itertools
import os
import signal
import subprocess
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

STARTING = "STARTING"
RUNNING = "RUNNING"
SUSPENDED = "SUSPENDED"
EXITED = "EXITED"
SIGNALED = "SIGNALED"
LOST = "LOST"
TERMINAL = frozenset({EXITED, SIGNALED, LOST})

_ALLOWED = {
    STARTING: {RUNNING, LOST},
    RUNNING: {SUSPENDED, EXITED, SIGNALED, LOST},
    SUSPENDED: {RUNNING, EXITED, SIGNALED, LOST},
}

KILL, SUSPEND, CONTINUE = "KILL", "SUSPEND", "CONTINUE"
_SIGNALS = {KILL: signal.SIGKILL, SUSPEND: getattr(signal, "SIGSTOP", None),
            CONTINUE: getattr(signal, "SIGCONT", None)}
_SIGNAL_FROM = {KILL: (RUNNING, SUSPENDED), SUSPEND: (RUNNING,), CONTINUE: (SUSPENDED,)}

STDOUT, STDERR = "STDOUT", "STDERR"
DEFAULT_MAX_LINES = 10000
READ_CHUNK = 65536
MAX_READ_PER_POLL = 4 * READ_CHUNK
KEEP_FINISHED = 1000


class SupervisorError(Exception):
    kind = "SupervisorError"


class ExecFailure(SupervisorError):
    kind = "ExecFailure"

    def __init__(self, message, handle=None):
        super().__init__(message)
        self.handle = handle


class UnknownHandle(SupervisorError):
    kind = "UnknownHandle"


class InvalidTransition(SupervisorError):
    kind = "InvalidTransition"


class OutputBuffer:
    """Numbered lines, keeping only the newest ``cap``.

    Line numbers are absolute, so a reader can resume from where it left off
    even after older lines have been dropped.
    """

    def __init__(self, cap: int = DEFAULT_MAX_LINES):
        if cap < 1:
            raise ValueError("output cap must be at least one line")
        self.cap = cap
        self.lines: deque[str] = deque(maxlen=cap)
        self.total = 0
        self._partial = b""

    @property
    def dropped(self) -> int:
        return self.total - len(self.lines)

    @property
    def first(self) -> int:
        return self.dropped

    def feed(self, data: bytes):
        data = self._partial + data
        *complete, self._partial = data.split(b"\n")
        for raw in complete:
            self.append(raw.decode("utf-8", "replace"))

    def flush(self):
        if self._partial:
            self.append(self._partial.decode("utf-8", "replace"))
            self._partial = b""

    def append(self, line: str):
        self.lines.append(line.rstrip("\r"))
        self.total += 1

    def fetch(self, from_line: int = 0) -> list[str]:
        """Lines numbered >= ``from_line``; a marker stands in for dropped ones."""
        from_line = max(0, int(from_line))
        out = []
        if from_line < self.first:
            out.append(f"[{self.first - from_line} lines dropped]")
            from_line = self.first
        out.extend(itertools.islice(self.lines, from_line - self.first, None))
        return out


@dataclass
class ProcessHandle:
    handle_id: str
    command: list[str]
    env: dict[str, str] = field(default_factory=dict)
    state: str = STARTING
    exit_code: int | None = None
    signal: int | None = None
    cause: str = ""
    started_at: float = 0.0
    ended_at: float | None = None
    pid: int | None = None
    max_runtime_s: float | None = None
    stdout_buf: OutputBuffer = field(default_factory=OutputBuffer)
    stderr_buf: OutputBuffer = field(default_factory=OutputBuffer)
    proc: subprocess.Popen | None = field(default=None, repr=False)
    killed_for: str = ""
    notify: object = field(default=None, repr=False)
    _fds: dict = field(default_factory=dict, repr=False)

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL

    def buffer(self, channel: str) -> OutputBuffer:
        if channel == STDOUT:
            return self.stdout_buf
        if channel == STDERR:
            return self.stderr_buf
        raise ValueError(f"channel must be {STDOUT} or {STDERR}, not {channel!r}")

    def runtime(self, now: float) -> float:
        return (self.ended_at if self.ended_at is not None else now) - self.started_at

    def status(self, now: float) -> dict:
        return {"handle": self.handle_id, "state": self.state, "exit_code": self.exit_code,
                "signal": self.signal, "cause": self.cause, "pid": self.pid,
                "command": list(self.command), "runtime_s": round(self.runtime(now), 4),
                "stdout_lines": self.stdout_buf.total, "stderr_lines": self.stderr_buf.total,
                "killed_for": self.killed_for}


class ProcessSupervisor:
    """Owns child processes for one LPF; all methods return immediately."""

    def __init__(self, clock=None, on_event: Callable[[dict], None] | None = None,
                 max_output_lines: int = DEFAULT_MAX_LINES, prefix: str = "p",
                 on_runaway: Callable[[ProcessHandle], None] | None = None):
        self.now = clock.now if clock is not None else time.monotonic
        self.on_event = on_event
        self.on_runaway = on_runaway
        self.max_output_lines = max_output_lines
        self.handles: dict[str, ProcessHandle] = {}
        self._ids = itertools.count(1)
        self._prefix = f"{prefix}{os.getpid()}-"

    # -- queries ---------------------------------------------------------------
    @property
    def children(self) -> list[ProcessHandle]:
        """Handles whose process has not been reaped yet."""
        return [h for h in self.handles.values() if not h.terminal]

    def get(self, handle_id: str) -> ProcessHandle:
        try:
            return self.handles[handle_id]
        except KeyError:
            raise UnknownHandle(f"no process handle {handle_id!r}") from None

    def query_status(self, handle_id: str) -> dict:
        return self.get(handle_id).status(self.now())

    def fetch_output(self, handle_id: str, channel: str = STDOUT, from_line: int = 0) -> dict:
        buf = self.get(handle_id).buffer(channel)
        return {"handle": handle_id, "channel": channel, "lines": buf.fetch(from_line),
                "next_line": buf.total, "dropped": buf.dropped}

    # -- lifecycle -------------------------------------------------------------
    def start(self, command, env: dict | None = None, limits: dict | None = None,
              cwd: str | None = None, notify=None) -> ProcessHandle:
        """Launch ``command``; ``notify`` is an opaque tag kept on the handle."""
        command = [str(c) for c in (command or [])]
        if not command or not command[0]:
            raise ValueError("command needs a non-empty executable path")
        limits = limits or {}
        cap = int(limits.get("max_output_lines") or self.max_output_lines)
        max_rt = limits.get("max_runtime_s")
        h = ProcessHandle(f"{self._prefix}{next(self._ids)}", command, dict(env or {}),
                          started_at=self.now(), max_runtime_s=float(max_rt) if max_rt else None,
                          stdout_buf=OutputBuffer(cap), stderr_buf=OutputBuffer(cap), notify=notify)
        self.handles[h.handle_id] = h
        self._prune()
        full_env = dict(os.environ)
        full_env.update(h.env)
        try:
            proc = subprocess.Popen(command, stdin=subprocess.DEVNULL, stdout=subprocess.PIPE,
                                    stderr=subprocess.PIPE, env=full_env, cwd=cwd,
                                    start_new_session=True, close_fds=True)
        except (OSError, ValueError) as exc:
            h.cause = f"{type(exc).__name__}: {exc}"
            self._move(h, LOST)
            raise ExecFailure(f"cannot start {command[0]}: {h.cause}", h) from exc
        h.proc, h.pid = proc, proc.pid
        for channel, pipe in ((STDOUT, proc.stdout), (STDERR, proc.stderr)):
            os.set_blocking(pipe.fileno(), False)
            h._fds[channel] = pipe
        self._move(h, RUNNING)
        return h

    def signal(self, handle_id: str, sig: str):
        """Deliver KILL/SUSPEND/CONTINUE; the state change shows up in a later poll."""
        h = self.get(handle_id)
        sig = str(sig).upper()
        if sig not in _SIGNALS:
            raise InvalidTransition(f"unknown signal {sig!r}")
        if _SIGNALS[sig] is None:
            raise InvalidTransition(f"{sig} is not supported on this platform")
        if h.state not in _SIGNAL_FROM[sig]:
            raise InvalidTransition(f"cannot {sig} a process in state {h.state}")
        try:
            os.kill(h.pid, _SIGNALS[sig])
        except ProcessLookupError:
            pass  # already gone; the next poll reaps it

    def expected_state(self, sig: str) -> set[str]:
        return {KILL: TERMINAL, SUSPEND: {SUSPENDED} | TERMINAL, CONTINUE: {RUNNING} | TERMINAL}[sig]

    def poll(self) -> list[tuple[str, dict]]:
        """One non-blocking sweep; returns (handle_id, event) for each transition."""
        events: list[tuple[str, dict]] = []
        now = self.now()
        for h in self.children:
            self._drain(h)
            self._check_status(h, events)
            if (not h.terminal and h.max_runtime_s is not None and not h.killed_for
                    and now - h.started_at > h.max_runtime_s):
                h.killed_for = f"max_runtime_s={h.max_runtime_s:g} exceeded"
                try:
                    os.kill(h.pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
                if self.on_runaway is not None:
                    self.on_runaway(h)
        return events

    def kill_all(self, timeout: float = 2.0):
        """Kill and reap every live child (used when the owner shuts down)."""
        for h in self.children:
            try:
                os.kill(h.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
        deadline = time.monotonic() + timeout
        while self.children and time.monotonic() < deadline:
            self.poll()
            if self.children:
                time.sleep(0.005)

    # -- internals -------------------------------------------------------------
    def _drain(self, h: ProcessHandle, limit: int = MAX_READ_PER_POLL):
        for channel, pipe in list(h._fds.items()):
            got = 0
            buf = h.buffer(channel)
            while got < limit:
                try:
                    data = os.read(pipe.fileno(), READ_CHUNK)
                except BlockingIOError:
                    break
                except OSError:
                    data = b""
                if not data:
                    buf.flush()
                    pipe.close()
                    del h._fds[channel]
                    break
                buf.feed(data)
                got += len(data)

    def _check_status(self, h: ProcessHandle, events):
        flags = os.WNOHANG | os.WUNTRACED | getattr(os, "WCONTINUED", 0)
        while not h.terminal:
            try:
                pid, status = os.waitpid(h.pid, flags)
            except ChildProcessError:
                h.cause = h.cause or "process vanished without an observable exit"
                self._finish(h, LOST, events)
                return
            if pid == 0:
                return
            if os.WIFSTOPPED(status):
                if h.state == RUNNING:
                    events.append((h.handle_id, self._move(h, SUSPENDED)))
            elif getattr(os, "WIFCONTINUED", lambda s: False)(status):
                if h.state == SUSPENDED:
                    events.append((h.handle_id, self._move(h, RUNNING)))
            elif os.WIFSIGNALED(status):
                h.signal = os.WTERMSIG(status)
                if h.proc is not None:
                    h.proc.returncode = -h.signal
                self._finish(h, SIGNALED, events)
            elif os.WIFEXITED(status):
                h.exit_code = os.WEXITSTATUS(status)
                if h.proc is not None:
                    h.proc.returncode = h.exit_code
                self._finish(h, EXITED, events)

    def _finish(self, h, state, events):
        # The writer side is closed (or gone): whatever is buffered is final.
        self._drain(h, limit=1 << 30)
        for pipe in h._fds.values():
            pipe.close()
        h._fds.clear()
        h.stdout_buf.flush()
        h.stderr_buf.flush()
        h.ended_at = self.now()
        events.append((h.handle_id, self._move(h, state)))

    def _move(self, h: ProcessHandle, state: str) -> dict:
        if state not in _ALLOWED.get(h.state, ()):
            raise InvalidTransition(f"{h.handle_id}: {h.state} -> {state} is not allowed")
        old, h.state = h.state, state
        if state in TERMINAL and h.ended_at is None:
            h.ended_at = self.now()
        return self._event(h, old, state)

    def _event(self, h, old, new):
        ev = {"handle": h.handle_id, "from": old, "to": new, "exit_code": h.exit_code,
              "signal": h.signal, "cause": h.cause, "at": self.now(),
              "killed_for": h.killed_for}
        if self.on_event is not None:
            self.on_event(ev)
        return ev

    def _prune(self):
        finished = [k for k, h in self.handles.items() if h.terminal]
        for k in finished[:max(0, len(finished) - KEEP_FINISHED)]:
            del self.handles[k]
