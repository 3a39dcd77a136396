from __future__ import annotations

import time

import psutil
import pytest

from lpfarm.config.activation import FAILED, SUCCESS
from lpfarm.lpf.core import LpfContext
from lpfarm.lpf.message import Address
from lpfarm.net.client import Client

from conftest import free_port
from helpers import BareProcesses

HOSTS = ("127.0.0.2", "127.0.0.3")

CONF = """\
System Procs {{
  bare_port = {bp}
  on_child_failure = FAIL
  Service A {{
    Lpf a1 host=127.0.0.2 port={p1} {{
      Lpf a2 host=127.0.0.3 port={p2} {{
      }}
    }}
  }}
  Service B {{
    Lpf b1 host=127.0.0.3 port={p3} {{
    }}
  }}
}}
"""


def listening(host, port):
    return any(c.laddr and c.laddr.ip == host and c.laddr.port == port and c.status == psutil.CONN_LISTEN
               for c in psutil.net_connections("tcp"))


@pytest.fixture
def bares(tmp_path):
    bp = free_port("127.0.0.2")
    with BareProcesses(HOSTS, bp, log_dir=tmp_path) as b:
        yield b


@pytest.fixture
def master(driver):
    return driver.add(LpfContext("ConfigurationMaster", "127.0.0.1", 0))


def conf(bp):
    return CONF.format(bp=bp, p1=free_port("127.0.0.2"), p2=free_port("127.0.0.3"), p3=free_port("127.0.0.3") + 3)


def master_call(driver, master, verb, body, timeout=20.0):
    driver.start()
    try:
        with Client() as c:
            return c.request(Address("ConfigurationService", host=master.host, port=master.port), verb, body,
                             timeout=timeout)
    finally:
        driver.stop()


def ports_of(text):
    import re
    return [(h, int(p)) for h, p in re.findall(r"host=(\S+) port=(\d+)", text)]


def test_fork_mode_activation_status_and_reap(driver, bares, master):
    text = conf(bares.port)
    rep = master_call(driver, master, "ActivateConfig", {"text": text})
    assert {e["name"]: e["outcome"] for e in rep.body["entries"]} == {
        "ConfigurationMaster": SUCCESS, "a1": SUCCESS, "a2": SUCCESS, "b1": SUCCESS}
    with Client() as c:
        for host, port in ports_of(text):
            st = c.request(Address("Lpf", host=host, port=port), "LpfStatus", {}, timeout=3)
            assert st.verb == "LpfStatusAnswer"
            assert st.body["stats"]["parse_config"] == 0
    children = {h: len(psutil.Process(p.pid).children()) for h, p in bares.procs.items()}
    assert children == {"127.0.0.2": 1, "127.0.0.3": 2}

    rr = master_call(driver, master, "Reap", {"scope": "A"})
    assert rr.verb == "ReapReport"
    time.sleep(0.3)
    (h1, p1), (h2, p2), (h3, p3) = ports_of(text)
    assert not listening(h1, p1) and not listening(h2, p2) and listening(h3, p3)

    rr = master_call(driver, master, "Reap", {"scope": "ALL"})
    assert rr.body["master_stopping"]
    deadline = time.monotonic() + 3
    while time.monotonic() < deadline and any(psutil.Process(p.pid).children() for p in bares.procs.values()):
        time.sleep(0.05)
    assert all(not psutil.Process(p.pid).children() for p in bares.procs.values())
    assert all(p.poll() is None for p in bares.procs.values())  # bares survive a reap


def test_fork_mode_dead_host_fails_fast(driver, bares, master):
    bares.kill("127.0.0.3")
    t0 = time.monotonic()
    rep = master_call(driver, master, "ActivateConfig", {"text": conf(bares.port)})
    got = {e["name"]: e["outcome"] for e in rep.body["entries"]}
    assert got["ConfigurationMaster"] == FAILED and got["a1"] == FAILED and got["a2"] == FAILED
    assert time.monotonic() - t0 < 5
