"""Generator-based cooperative tasks driven by the LPF loop.

A task is a generator that yields one of the request objects below and is
resumed by the loop when the request is satisfied::

    def lookup(lpf):
        answer = yield Wait(query, timeout=2.0)
        if answer is None: ...          # timed out
        elif answer.verb == "Undeliverable": ...

Tasks never block: while a task waits, the loop keeps dispatching.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Generator

from .errors import TaskCancelled
from .message import Message


@dataclass
class Wait:
    message: Message
    timeout: float | None = None


@dataclass
class WaitAll:
    messages: list[Message]
    timeout: float | None = None


@dataclass
class Sleep:
    seconds: float


@dataclass
class Join:
    """Wait for tasks to finish; resumes with the list of tasks still running."""

    tasks: list[Task]
    timeout: float | None = None


class Task:
    def __init__(self, lpf, gen: Generator, name: str, owner: str | None = None):
        self.lpf = lpf
        self.gen = gen
        self.name = name
        self.owner = owner
        self.done = False
        self.result: Any = None
        self.error: BaseException | None = None
        self._joiners: list[_JoinWait] = []
        self._callbacks = []

    def value(self):
        if not self.done:
            raise RuntimeError(f"task {self.name} still running")
        if self.error is not None:
            raise self.error
        return self.result

    def add_done_callback(self, fn):
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def cancel(self):
        if self.done:
            return
        self.lpf._forget_task(self)
        try:
            self.gen.close()
        except Exception:
            pass
        self._finish(None, TaskCancelled(self.name))

    def _finish(self, result, error):
        self.done = True
        self.result, self.error = result, error
        watched = bool(self._joiners or self._callbacks)
        for j in list(self._joiners):
            j.task_finished(self)
        self._joiners.clear()
        for fn in self._callbacks:
            fn(self)
        self._callbacks.clear()
        if error is not None and not watched and not isinstance(error, TaskCancelled):
            self.lpf.alarm("ERROR", f"task {self.name} failed: {error!r}", module=self.owner or "Lpf")

    def step(self, value=None, exc: BaseException | None = None):
        while True:
            try:
                if exc is not None:
                    request = self.gen.throw(exc)
                else:
                    request = self.gen.send(value)
            except StopIteration as stop:
                self._finish(stop.value, None)
                return
            except Exception as err:
                self._finish(None, err)
                return
            value, exc = None, None
            immediate = self.lpf._park(self, request)
            if immediate is None:
                return
            # The request could be satisfied without waiting.
            value, exc = immediate


@dataclass
class _Waiter:
    task: Task
    deadline: float | None
    group: _Group | None = None


@dataclass
class _Group:
    task: Task
    ids: list[str]
    answers: dict[str, Message] = field(default_factory=dict)
    deadline: float | None = None

    def complete(self) -> bool:
        return len(self.answers) == len(self.ids)

    def result(self) -> list[Message | None]:
        return [self.answers.get(i) for i in self.ids]


class _JoinWait:
    def __init__(self, lpf, task: Task, tasks: list[Task], deadline):
        self.lpf, self.task, self.tasks, self.deadline = lpf, task, tasks, deadline
        self.fired = False

    def pending(self):
        return [t for t in self.tasks if not t.done]

    def task_finished(self, _t):
        if not self.fired and not self.pending():
            self.fire()

    def fire(self):
        if self.fired:
            return
        self.fired = True
        self.lpf._joins.discard(self)
        for t in self.tasks:
            if self in t._joiners:
                t._joiners.remove(self)
        self.lpf._resume_later(self.task, self.pending())
