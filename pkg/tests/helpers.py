from __future__ import annotations

from lpfarm.lpf.core import PASSIVE, LpfContext, ModuleSpec
from lpfarm.lpf.message import Address


class NamingCluster:
    """Two (or more) replica LPFs plus a broker LPF, all driven by ``driver``."""

    def __init__(self, driver, replicas=2, sync_period_s=5.0, clock=None):
        self.driver = driver
        self.clock = clock
        self.sync_period_s = sync_period_s
        self.replica_lpfs: list[LpfContext] = []
        self.ports: list[int] = []
        for i in range(replicas):
            lpf = LpfContext(f"ns{i}", "127.0.0.1", 0, clock=clock)
            self.replica_lpfs.append(driver.add(lpf))
            self.ports.append(lpf.port)
        for i, lpf in enumerate(self.replica_lpfs):
            self._load_replica(lpf, i)
        self.broker_lpf = self.start_broker()

    def replica_addr(self, i) -> str:
        return f"127.0.0.1:{self.ports[i]}/NsReplica"

    def _load_replica(self, lpf, i):
        peers = [self.replica_addr(j) for j in range(len(self.ports)) if j != i]
        lpf.register_module(ModuleSpec("NsReplica", PASSIVE, {"peers": peers,
                                                             "sync_period_s": self.sync_period_s}))

    def replica(self, i):
        return self.replica_lpfs[i].modules["NsReplica"]

    def kill_replica(self, i):
        lpf = self.replica_lpfs[i]
        lpf.stop()
        lpf.loop_iteration()
        self.driver.remove(lpf)

    def restart_replica(self, i):
        lpf = LpfContext(f"ns{i}", "127.0.0.1", self.ports[i], clock=self.clock)
        self.replica_lpfs[i] = self.driver.add(lpf)
        self._load_replica(lpf, i)
        return lpf

    def start_broker(self, port=0):
        lpf = LpfContext("broker", "127.0.0.1", port, clock=self.clock)
        lpf.register_module(ModuleSpec("NamingService", PASSIVE,
                                       {"replicas": [self.replica_addr(i) for i in range(len(self.ports))]},
                                       impl="NsBroker"))
        self.broker_lpf = self.driver.add(lpf)
        return lpf

    def kill_broker(self):
        self.broker_lpf.stop()
        self.broker_lpf.loop_iteration()
        self.driver.remove(self.broker_lpf)

    @property
    def broker_addr(self) -> str:
        return f"127.0.0.1:{self.broker_lpf.port}/NamingService"

    @property
    def broker_address(self) -> Address:
        return Address.parse(self.broker_addr)

    def client_lpf(self, name, domains=("default",), **kw):
        cfg = {f"naming.{d}": self.broker_addr for d in domains}
        lpf = LpfContext(name, "127.0.0.1", 0, config=cfg, clock=self.clock, **kw)
        return self.driver.add(lpf)


def run_task(driver, lpf, gen, timeout=10.0):
    return driver.wait_task(lpf.spawn(gen), timeout)


def ask(driver, lpf, dest, verb, body=None, timeout=5.0):
    """Send from ``lpf`` and drive until the answer (or None on timeout)."""
    from lpfarm.lpf.message import Message
    from lpfarm.lpf.tasks import Wait

    def go():
        return (yield Wait(Message(verb, dest, Address(module="tester"), dict(body or {})), timeout))

    return run_task(driver, lpf, go(), timeout + 2)


class InlineSite:
    """BareLPFs (inline spawn mode) on several loopback hosts plus a master LPF."""

    def __init__(self, driver, hosts=("127.0.0.1", "127.0.0.2", "127.0.0.3"), bare_port=None):
        from lpfarm.config.bare import BareLpf
        from conftest import free_port
        self.driver = driver
        self.bare_port = bare_port or free_port()
        self.bares = {}
        for h in hosts:
            self.bares[h] = BareLpf(h, self.bare_port, mode="inline")
            driver.add(self.bares[h].lpf)
        self.master = driver.add(LpfContext("ConfigurationMaster", "127.0.0.1", 0))
        self.client = driver.add(LpfContext("operator", "127.0.0.1", 0))

    def kill_bare(self, host):
        bare = self.bares.pop(host)
        bare.lpf.stop()
        bare.lpf.loop_iteration()

    def new_master(self):
        self.master = self.driver.add(LpfContext("ConfigurationMaster", "127.0.0.1", 0))
        return self.master

    @property
    def master_cs(self) -> Address:
        return Address("ConfigurationService", host=self.master.host, port=self.master.port)

    def activate(self, text, timeout=30):
        return ask(self.driver, self.client, self.master_cs, "ActivateConfig", {"text": text}, timeout)

    def reap(self, scope="ALL", timeout=20):
        return ask(self.driver, self.client, self.master_cs, "Reap", {"scope": scope}, timeout)

    def live(self):
        return {l.name: l for l in self.driver.lpfs if not l.stopped}


class BareProcesses:
    """Real ``lpf-bare`` processes, one per loopback host, each in its own session."""

    def __init__(self, hosts, port, mode="fork", log_dir=None):
        import os
        import signal
        import subprocess
        import sys
        self.port = port
        self.procs = {}
        self._signal = signal
        for h in hosts:
            cmd = [sys.executable, "-m", "lpfarm.config.bare", "--host", h, "--port", str(port), "--mode", mode]
            if log_dir is not None:
                cmd += ["--log", os.path.join(str(log_dir), f"bare-{h}.log")]
            self.procs[h] = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                                             start_new_session=True)
        for h, p in self.procs.items():
            line = p.stdout.readline().decode()
            if "listening" not in line:
                self.close()
                raise RuntimeError(f"lpf-bare on {h} did not start: {line!r}")

    def kill(self, host):
        import os
        p = self.procs.pop(host)
        try:
            os.killpg(p.pid, self._signal.SIGKILL)
        except ProcessLookupError:
            pass
        p.wait()

    def close(self):
        for h in list(self.procs):
            self.kill(h)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
