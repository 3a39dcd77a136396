"""BareLPF: a minimal LPF on a fixed port whose only duty is spawning LPFs.

Its ``LocalLpfMap`` module keeps track of the LPFs started on this host and
answers ``SpawnLpf``, ``ListLocalLpfs`` and ``LocalLpfReaper``.
"""
from __future__ import annotations

import argparse
import json
import os
import select
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field

from ..lpf import registry
from ..lpf.core import ACTIVE, LpfContext, Module, ModuleSpec
from ..lpf.message import Address, Message, error_reply
from ..lpf.tasks import Sleep, WaitAll
from .tree import default_bare_port

READY_TIMEOUT = 5.0
STOP_GRACE = 3.0


class SpawnError(Exception):
    def __init__(self, kind: str, text: str):
        super().__init__(text)
        self.kind = kind


@dataclass
class LocalLpf:
    name: str
    port: int
    marker: str
    pid: int
    started_at: float
    proc: subprocess.Popen | None = None
    lpf: LpfContext | None = None
    exited: bool = False
    exit_status: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "port": self.port, "marker": self.marker, "pid": self.pid,
                "alive": not self.exited, "started_at": self.started_at}


def port_free(host: str, port: int) -> bool:
    with socket.socket() as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((host, port))
        except OSError:
            return False
    return True


def _child_main(host, port, name, marker, ready_fd, config):
    """Body of a forked LPF. Never returns."""
    code = 0
    try:
        signal.signal(signal.SIGTERM, signal.SIG_DFL)
        signal.signal(signal.SIGINT, signal.SIG_IGN)
        try:
            lpf = LpfContext(name, host, port, marker=marker, config=config)
        except Exception as exc:
            os.write(ready_fd, f"err {type(exc).__name__} {exc}\n".encode())
            os._exit(3)
        signal.signal(signal.SIGTERM, lambda *_: lpf.stop())
        os.write(ready_fd, b"ok\n")
        os.close(ready_fd)
        lpf.run()
    except BaseException:
        code = 1
    finally:
        os._exit(code)


@registry.module_type("LocalLpfMap")
class LocalLpfMap(Module):
    """Spawns and tracks the LPFs of one host.

    ``mode`` selects how: ``fork`` (default), ``exec`` (a fresh interpreter
    running ``lpf-run``) or ``inline`` (a new context in this process, driven
    by the same driver; for tests).
    """

    kind = ACTIVE

    def init(self, config):
        self.mode = config.get("mode", "fork")
        if self.mode not in ("fork", "exec", "inline"):
            raise ValueError(f"unknown spawn mode {self.mode!r}")
        self.children: dict[str, LocalLpf] = {}
        self.spawned = 0

    # -- spawning -----------------------------------------------------------
    def spawn_lpf(self, name: str, port: int, marker: str = "", config: dict | None = None) -> LocalLpf:
        host = self.lpf.host
        old = self.children.get(name)
        if old is not None and not old.exited:
            self.terminate(old)
        if not port_free(host, port):
            raise SpawnError("PortInUse", f"port {host}:{port} is already in use")
        config = dict(config or {})
        if self.mode == "inline":
            child = self._spawn_inline(name, host, port, marker, config)
        elif self.mode == "exec":
            child = self._spawn_exec(name, host, port, marker, config)
        else:
            child = self._spawn_fork(name, host, port, marker, config)
        self.children[name] = child
        self.spawned += 1
        self.lpf.info(f"spawned {name} at {host}:{port} pid {child.pid}", module=self.name)
        return child

    def _spawn_inline(self, name, host, port, marker, config):
        driver = getattr(self.lpf, "driver", None)
        if driver is None:
            raise SpawnError("SpawnFailure", "inline mode needs a driver")
        try:
            lpf = LpfContext(name, host, port, marker=marker, config=config)
        except Exception as exc:
            raise SpawnError("SpawnFailure", str(exc)) from exc
        driver.add(lpf)
        return LocalLpf(name, port, marker, os.getpid(), time.time(), lpf=lpf)

    def _await_ready(self, fd, pid_hint) -> str:
        deadline = time.monotonic() + READY_TIMEOUT
        buf = b""
        try:
            while b"\n" not in buf:
                left = deadline - time.monotonic()
                if left <= 0:
                    return f"err Timeout no readiness signal from pid {pid_hint}"
                r, _, _ = select.select([fd], [], [], left)
                if not r:
                    continue
                chunk = os.read(fd, 4096)
                if not chunk:
                    return "err SpawnFailure child exited before signalling readiness"
                buf += chunk
        finally:
            os.close(fd)
        return buf.decode(errors="replace").strip()

    def _spawn_fork(self, name, host, port, marker, config):
        r, w = os.pipe()
        pid = os.fork()
        if pid == 0:
            os.close(r)
            try:
                self.lpf.net.close_fds()
                self.lpf.log.close()
            except Exception:
                pass
            _child_main(host, port, name, marker, w, config)
        os.close(w)
        status = self._await_ready(r, pid)
        if status != "ok":
            self._force_reap(pid)
            raise SpawnError(*self._parse_err(status))
        return LocalLpf(name, port, marker, pid, time.time())

    def _spawn_exec(self, name, host, port, marker, config):
        r, w = os.pipe()
        cmd = [sys.executable, "-m", "lpfarm.lpf.main", "--name", name, "--host", host,
               "--port", str(port), "--marker", marker, "--ready-fd", str(w)]
        for k, v in config.items():
            cmd += ["--set", f"{k}={json.dumps(v)}"]
        try:
            proc = subprocess.Popen(cmd, pass_fds=(w,), stdin=subprocess.DEVNULL)
        except OSError as exc:
            os.close(r)
            os.close(w)
            raise SpawnError("SpawnFailure", str(exc)) from exc
        os.close(w)
        status = self._await_ready(r, proc.pid)
        if status != "ok":
            proc.kill()
            proc.wait()
            raise SpawnError(*self._parse_err(status))
        return LocalLpf(name, port, marker, proc.pid, time.time(), proc=proc)

    @staticmethod
    def _parse_err(status: str):
        parts = status.split(" ", 2)
        kind = parts[1] if len(parts) > 1 else "SpawnFailure"
        if kind == "BindFailure":
            kind = "PortInUse"
        elif kind not in ("PortInUse", "Timeout"):
            kind = "SpawnFailure"
        return kind, parts[2] if len(parts) > 2 else status

    @staticmethod
    def _force_reap(pid):
        try:
            os.kill(pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        try:
            os.waitpid(pid, 0)
        except ChildProcessError:
            pass

    # -- lifecycle ------------------------------------------------------------
    def _poll_exit(self, child: LocalLpf) -> bool:
        if child.exited:
            return True
        if child.lpf is not None:
            child.exited = child.lpf.stopped
            return child.exited
        try:
            if child.proc is not None:
                rc = child.proc.poll()
                if rc is None:
                    return False
                child.exit_status = rc
            else:
                pid, status = os.waitpid(child.pid, os.WNOHANG)
                if pid == 0:
                    return False
                child.exit_status = os.waitstatus_to_exitcode(status)
        except ChildProcessError:
            child.exit_status = None
        child.exited = True
        return True

    def terminate(self, child: LocalLpf, grace: float = STOP_GRACE):
        """Synchronous stop (used before respawning under the same name)."""
        if child.lpf is not None:
            child.lpf.stop()
            if not child.lpf.stopped:
                child.lpf.loop_iteration()  # releases the listening socket now
            child.exited = True
            return
        try:
            os.kill(child.pid, signal.SIGTERM)
        except ProcessLookupError:
            pass
        deadline = time.monotonic() + grace
        while not self._poll_exit(child) and time.monotonic() < deadline:
            time.sleep(0.01)
        if not child.exited:
            try:
                os.kill(child.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            while not self._poll_exit(child):
                time.sleep(0.01)

    def run(self):
        for name, child in list(self.children.items()):
            if self._poll_exit(child):
                del self.children[name]
                self.lpf.info(f"{name} (pid {child.pid}) exited with {child.exit_status}", module=self.name)
        return None

    def kill(self):
        for child in list(self.children.values()):
            if not child.exited:
                self.terminate(child, grace=1.0)

    # -- messages -------------------------------------------------------------
    def listing(self) -> list[dict]:
        self.run()
        return [c.to_dict() for c in self.children.values()]

    def do(self, msg):
        if msg.verb == "SpawnLpf":
            b = msg.body
            try:
                child = self.spawn_lpf(str(b["name"]), int(b["port"]), str(b.get("marker", "")), b.get("config"))
            except SpawnError as exc:
                self.lpf.alarm("WARNING", f"spawn of {b.get('name')} failed: {exc.kind}: {exc}", module=self.name)
                return [error_reply(msg, exc.kind, str(exc))]
            except (KeyError, TypeError, ValueError) as exc:
                return [error_reply(msg, "BadRequest", str(exc))]
            return [msg.reply("LpfSpawned", {"name": child.name, "host": self.lpf.host, "port": child.port,
                                             "pid": child.pid, "marker": child.marker})]
        if msg.verb == "ListLocalLpfs":
            return [msg.reply("LocalLpfList", {"host": self.lpf.host, "bare_port": self.lpf.port,
                                               "lpfs": self.listing()})]
        if msg.verb == "LocalLpfReaper":
            self.spawn(self._reap(msg), f"{self.name}.reap")
            return None
        if msg.is_answer:
            return None
        return [error_reply(msg, "UnknownVerb", msg.verb)]

    def _reap(self, msg):
        services = msg.body.get("services")
        exclude = set(msg.body.get("exclude") or [])
        targets = [c for c in self.children.values()
                   if not c.exited and c.name not in exclude
                   and (not services or c.marker in services)]
        stops = [Message("StopLocalLpf", Address("Lpf", host=self.lpf.host, port=c.port), self.address)
                 for c in targets]
        if stops:
            yield WaitAll(stops, timeout=STOP_GRACE / 2)
        deadline = self.lpf.clock.now() + STOP_GRACE
        while any(not self._poll_exit(c) for c in targets) and self.lpf.clock.now() < deadline:
            yield Sleep(0.02)
        killed = []
        for c in targets:
            if not self._poll_exit(c):
                killed.append(c.name)
                self.terminate(c, grace=0.5)
        self.run()
        self.lpf.post(msg.reply("ReaperReport", {
            "host": self.lpf.host,
            "stopped": [c.name for c in targets if c.name not in killed],
            "killed": killed,
            "remaining": [c.name for c in self.children.values()],
        }))


class BareLpf:
    """Convenience wrapper: an LPF with the LocalLpfMap loaded."""

    def __init__(self, host: str = "127.0.0.1", port: int | None = None, mode: str = "fork",
                 log_path: str | None = None):
        self.lpf = LpfContext("BareLPF", host, default_bare_port() if port is None else port,
                              marker="bare", log_path=log_path)
        self.lpf.register_module(ModuleSpec("LocalLpfMap", ACTIVE, {"mode": mode}))

    @property
    def map(self) -> LocalLpfMap:
        return self.lpf.modules["LocalLpfMap"]


def remote_start_command(host: str, port: int | None = None) -> list[str]:
    """The command line a remote starter (e.g. ssh) would run to boot a BareLPF."""
    cmd = ["lpf-bare", "--host", host]
    if port is not None:
        cmd += ["--port", str(port)]
    return cmd


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="lpf-bare", description="Run a BareLPF that spawns LPFs on request.")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None,
                   help="fixed control port (default: $LPF_BARE_PORT or 34500)")
    p.add_argument("--mode", choices=("fork", "exec"), default="fork")
    p.add_argument("--log", default=None)
    p.add_argument("--print-command", action="store_true",
                   help="print the remote start command line and exit")
    args = p.parse_args(argv)
    if args.print_command:
        print(" ".join(remote_start_command(args.host, args.port)))
        return 0
    bare = BareLpf(args.host, args.port, args.mode, args.log)
    signal.signal(signal.SIGTERM, lambda *_: bare.lpf.stop())
    print(f"BareLPF listening on {args.host}:{bare.lpf.port}", flush=True)
    try:
        bare.lpf.run()
    except KeyboardInterrupt:
        bare.lpf.stop()
        bare.lpf.loop_iteration()
    return 0


if __name__ == "__main__":
    sys.exit(main())
