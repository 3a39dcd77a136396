"""Farm deployments as configuration text, plus a harness that runs one.

``farm_config`` writes the whole two-pass system: naming for three domains
(upper, pc, er), the upper-layer services, and for each pass a farm server
with its node LPFs. ``FarmDeployment`` starts BareLPFs on loopback aliases,
activates that configuration from a Configuration Master and reaps it.
"""
from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field

from ..lpf.message import Address
from ..net.client import Client

DOMAINS = ("upper", "pc", "er")


@dataclass
class FarmLayout:
    naming_host: str = "127.0.0.1"
    upper_host: str = "127.0.0.2"
    server_hosts: dict = field(default_factory=lambda: {"PC": "127.0.0.3", "ER": "127.0.0.4"})
    node_hosts: dict = field(default_factory=lambda: {"PC": "127.0.0.5", "ER": "127.0.0.6"})
    nodes_per_farm: int = 4
    passes: tuple = ("PC", "ER")

    @property
    def hosts(self) -> list[str]:
        hs = [self.naming_host, self.upper_host]
        for p in self.passes:
            hs += [self.server_hosts[p], self.node_hosts[p]]
        return list(dict.fromkeys(hs))

    def node_names(self, pass_type: str) -> list[str]:
        return [f"{pass_type.lower()}-n{i + 1}" for i in range(self.nodes_per_farm)]


def _port_free(host: str, port: int) -> bool:
    with socket.socket() as s:
        try:
            s.bind((host, port))
        except OSError:
            return False
    return True


class PortAllocator:
    """Hands out ports that are free on every host, starting at ``base``."""

    def __init__(self, base: int, hosts):
        self.next = base
        self.hosts = list(hosts)

    def __call__(self) -> int:
        while True:
            port, self.next = self.next, self.next + 1
            if port > 65535:
                raise RuntimeError("ran out of ports")
            if all(_port_free(h, port) for h in self.hosts):
                return port


def _v(value) -> str:
    return json.dumps(value)


def farm_config(root: str, bare_port: int, alloc, layout: FarmLayout | None = None, *,
                system: str = "PromptReco", auto: bool = False, elf_args=None,
                activation_timeout_s: float = 20, extra_fm: dict | None = None,
                master: str | None = None) -> str:
    """The full configuration text; ``alloc()`` returns a fresh port each call."""
    lay = layout or FarmLayout()
    store = os.path.join(root, "bookkeeping")
    ns_ports = [alloc(), alloc()]
    lines = [f"System {system} {{", f"  bare_port = {bare_port}",
             f"  activation_timeout_s = {activation_timeout_s}", "  on_child_failure = FAIL",
             "  naming_timeout_s = 5"]
    if master:
        lines.append(f"  master = {master}")  # read by farmctl, ignored by activation
    for d in DOMAINS:
        lines.append(f"  naming.{d} = {lay.naming_host}:{ns_ports[0]}/NS_{d}")
    lines += ["", "  Service Naming {"]
    for i, port in enumerate(ns_ports):
        other = ns_ports[1 - i]
        lines.append(f"    Lpf ns-{'ab'[i]} host={lay.naming_host} port={port} {{")
        for d in DOMAINS:
            lines += [f"      Module NsReplica_{d} {{", "        impl = NsReplica",
                      f"        peers = {_v([f'{lay.naming_host}:{other}/NsReplica_{d}'])}",
                      "        sync_period_s = 2", "      }"]
        if i == 0:
            for d in DOMAINS:
                reps = [f"{lay.naming_host}:{p}/NsReplica_{d}" for p in ns_ports]
                lines += [f"      Module NS_{d} {{", "        impl = NsBroker", f"        replicas = {_v(reps)}",
                          "      }"]
        lines.append("    }")
    lines += ["  }", "", "  Service Upper {", f"    Lpf upper host={lay.upper_host} port={alloc()} {{"]
    for name, impl, extra in (("Stager", "Stager", {"staging_area": os.path.join(root, "staging")}),
                              ("Scheduler", "Scheduler", {}), ("Catalog", "Bookkeeping", {})):
        lines += [f"      Module {name} {{", f"        impl = {impl}", "        scope = GLOBAL",
                  "        domains = upper", f"        store = {_v(store)}"]
        lines += [f"        {k} = {_v(v)}" for k, v in extra.items()]
        lines.append("      }")
    lines += ["    }", "  }"]
    for p in lay.passes:
        low = p.lower()
        nodes = lay.node_names(p)
        fm = {"pass": p, "upper": "upper", "lower": low, "nodes": nodes, "auto": auto,
              "farm_root": os.path.join(root, "farms"), "poll_s": 0.5,
              "elf_args": list(elf_args or ["--event-time", "0.002"])}
        fm.update(extra_fm or {})
        lines += ["", f"  Service Farm{p} {{",
                  f"    Lpf {low}-server host={lay.server_hosts[p]} port={alloc()} {{",
                  "      Module OprSysHandler {", "      }",
                  "      Module RunProcessing {", "        impl = FsmHost", "        scope = GLOBAL",
                  f"        domains = {low}", "        definition = RunProcessing", "      }",
                  "      Module Bookkeeping {", "        impl = Bookkeeping", "        scope = GLOBAL",
                  f"        domains = {low}", f"        store = {_v(store)}", "      }",
                  f"      Module FarmManager{p} {{", "        impl = FarmManager", "        scope = GLOBAL",
                  f"        domains = {_v(['upper', low])}"]
        lines += [f"        {k} = {_v(v)}" for k, v in fm.items()]
        lines.append("      }")
        for n in nodes:
            lines += [f"      Lpf {n} host={lay.node_hosts[p]} port={alloc()} {{",
                      "        Module OprSysHandler {", "        }",
                      f"        Module NodeProcessing_{n} {{", "          impl = FsmHost", "          scope = GLOBAL",
                      f"          domains = {low}", "          definition = NodeProcessing", "        }", "      }"]
        lines += ["    }", "  }"]
    lines.append("}")
    return "\n".join(lines) + "\n"


class FarmDeployment:
    """BareLPF processes + a Configuration Master process for one farm config."""

    def __init__(self, root: str, layout: FarmLayout | None = None, base_port: int = 41000, **config_kw):
        self.root = root
        self.layout = layout or FarmLayout()
        os.makedirs(root, exist_ok=True)
        alloc = PortAllocator(base_port, self.layout.hosts)
        self.bare_port = alloc()
        self.master_port = alloc()
        config_kw.setdefault("master", f"127.0.0.1:{self.master_port}")
        self.text = farm_config(root, self.bare_port, alloc, self.layout, **config_kw)
        self.config_path = os.path.join(root, "farm.conf")
        with open(self.config_path, "w", encoding="utf-8") as fh:
            fh.write(self.text)
        self.procs: dict[str, subprocess.Popen] = {}

    @property
    def master(self) -> Address:
        return Address("ConfigurationService", host="127.0.0.1", port=self.master_port)

    def _spawn(self, key, cmd):
        log = open(os.path.join(self.root, f"{key}.out"), "wb")
        self.procs[key] = subprocess.Popen(cmd, stdout=log, stderr=subprocess.STDOUT, start_new_session=True)
        log.close()

    def start(self, ready_timeout: float = 10.0):
        for h in self.layout.hosts:
            self._spawn(f"bare-{h}", [sys.executable, "-m", "lpfarm.config.bare", "--host", h,
                                      "--port", str(self.bare_port),
                                      "--log", os.path.join(self.root, f"bare-{h}.log")])
        self._spawn("master", [sys.executable, "-m", "lpfarm.lpf.main", "--name", "ConfigurationMaster",
                               "--host", "127.0.0.1", "--port", str(self.master_port),
                               "--log", os.path.join(self.root, "master.log")])
        deadline = time.monotonic() + ready_timeout
        waiting = [(h, self.bare_port) for h in self.layout.hosts] + [("127.0.0.1", self.master_port)]
        while waiting and time.monotonic() < deadline:
            waiting = [(h, p) for h, p in waiting if _port_free(h, p)]
            time.sleep(0.05)
        if waiting:
            self.stop()
            raise RuntimeError(f"processes did not start listening: {waiting}")

    def activate(self, timeout: float = 60.0):
        with Client() as c:
            return c.request(self.master, "ActivateConfig", {"text": self.text}, timeout=timeout)

    def reap(self, scope: str = "ALL", timeout: float = 30.0):
        with Client() as c:
            return c.request(self.master, "Reap", {"scope": scope}, timeout=timeout)

    def fm(self, pass_type: str) -> Address:
        host = self.layout.server_hosts[pass_type]
        port = self.lpf_port(f"{pass_type.lower()}-server")
        return Address(f"FarmManager{pass_type}", host=host, port=port)

    def lpf_port(self, name: str) -> int:
        import re
        m = re.search(rf"Lpf {re.escape(name)} host=\S+ port=(\d+)", self.text)
        return int(m[1])

    def lpf_address(self, name: str) -> tuple[str, int]:
        import re
        m = re.search(rf"Lpf {re.escape(name)} host=(\S+) port=(\d+)", self.text)
        return m[1], int(m[2])

    def stop(self):
        for p in self.procs.values():
            try:
                os.killpg(p.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
        for p in self.procs.values():
            p.wait()
        self.procs.clear()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()
