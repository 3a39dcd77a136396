"""Small module implementations used by tests and demos."""
from __future__ import annotations

from . import registry
from .core import ACTIVE, Module
from .message import Address


@registry.module_type("Echo")
class Echo(Module):
    """Answers every message with ``Echoed`` carrying the same body."""

    def init(self, config):
        self.seen = []

    def do(self, msg):
        self.seen.append(msg)
        if msg.is_answer:
            return None
        return [msg.reply("Echoed", dict(msg.body))]


@registry.module_type("Recorder")
class Recorder(Module):
    def init(self, config):
        self.inits = getattr(self, "inits", 0) + 1
        self.received = []
        self.runs = 0

    def do(self, msg):
        self.received.append(msg)
        return None

    def run(self):
        self.runs += 1
        return None


@registry.module_type("Faulty")
class Faulty(Module):
    """Raises from ``do`` (and ``run`` when configured)."""

    def init(self, config):
        if config.get("fail_init"):
            raise RuntimeError("configured to fail in init")
        self.fail_run = bool(config.get("fail_run"))
        self.calls = 0

    def do(self, msg):
        self.calls += 1
        raise RuntimeError(f"fault #{self.calls}")

    def run(self):
        if self.fail_run:
            raise RuntimeError("run fault")


@registry.module_type("Chatter")
class Chatter(Module):
    """Active module that sends one ``Hello`` to ``peer`` on every run."""

    kind = ACTIVE

    def init(self, config):
        self.peer = config["peer"]
        self.received = []
        self.runs = 0

    def run(self):
        self.runs += 1
        return [self.message("Hello", Address(module=self.peer), {"n": self.runs})]

    def do(self, msg):
        self.received.append(msg)
        return None


@registry.module_type("Slow")
class Slow(Module):
    def init(self, config):
        self.delay = float(config.get("delay", 0.6))

    def do(self, msg):
        import time
        time.sleep(self.delay)
        return [msg.reply("Done")]
