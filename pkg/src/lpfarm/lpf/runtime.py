"""Drive several LPFs from one thread (tests, single-process demos)."""
from __future__ import annotations

import threading
import time
from typing import Callable, Iterable

from .core import IDLE_SLEEP, LpfContext


class Driver:
    """Round-robin loop over LPF contexts; each keeps its own state.

    Contexts never share data: they only talk over their sockets, so the
    driver is equivalent to running each LPF in its own process.
    """

    def __init__(self, lpfs: Iterable[LpfContext] = ()):
        self.lpfs: list[LpfContext] = list(lpfs)
        self._thread: threading.Thread | None = None
        self._halt = threading.Event()
        self._lock = threading.RLock()
        self.error: BaseException | None = None

    def add(self, lpf: LpfContext) -> LpfContext:
        with self._lock:
            self.lpfs.append(lpf)
        lpf.driver = self
        return lpf

    def remove(self, lpf: LpfContext):
        with self._lock:
            if lpf in self.lpfs:
                self.lpfs.remove(lpf)

    def step(self) -> bool:
        busy = False
        with self._lock:
            for lpf in list(self.lpfs):
                if lpf.stopped:
                    self.lpfs.remove(lpf)
                    continue
                busy = lpf.loop_iteration().busy or busy
        return busy

    def _idle(self, timeout):
        live = [l for l in self.lpfs if not l.stopped]
        if len(live) == 1:
            live[0].net.wait(timeout)
        else:
            time.sleep(min(timeout, 0.002))

    def run_until(self, pred: Callable[[], bool], timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if pred():
                return True
            if not self.step():
                self._idle(IDLE_SLEEP)
        return pred()

    def run_for(self, seconds: float):
        self.run_until(lambda: False, seconds)

    def wait_task(self, task, timeout: float = 10.0):
        if not self.run_until(lambda: task.done, timeout):
            raise TimeoutError(f"task {task.name} still running after {timeout}s")
        return task.value()

    # -- background operation ------------------------------------------------
    def start(self):
        if self._thread is not None:
            return
        self._halt.clear()

        def loop():
            try:
                while not self._halt.is_set():
                    if not self.step():
                        self._idle(IDLE_SLEEP)
            except BaseException as exc:  # surfaced to the test that owns the driver
                self.error = exc

        self._thread = threading.Thread(target=loop, name="lpf-driver", daemon=True)
        self._thread.start()

    def stop(self):
        if self._thread is None:
            return
        self._halt.set()
        self._thread.join(5)
        self._thread = None
        if self.error is not None:
            raise self.error

    def call(self, fn: Callable, *args, **kw):
        """Run ``fn`` between iterations (safe while the background thread runs)."""
        with self._lock:
            return fn(*args, **kw)

    def shutdown(self):
        self.stop()
        for lpf in list(self.lpfs):
            if not lpf.stopped:
                lpf.stop()
                lpf.loop_iteration()
        self.lpfs.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
