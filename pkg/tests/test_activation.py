from __future__ import annotations

import socket
import time

import pytest

from lpfarm.config.activation import FAILED, IGNORED_FAILURE, RECOVERED, SUCCESS
from lpfarm.lpf.message import Address

from conftest import free_port
from helpers import InlineSite, NamingCluster, ask


def outcomes(report):
    return {e["name"]: e["outcome"] for e in report.body["entries"]}


def three_lpf_config(site, ns=None, policy="FAIL", extra="", fallback=None, timeout=None, children=("c1", "c2")):
    lines = ["System Demo {", f"  bare_port = {site.bare_port}", f"  on_child_failure = {policy}"]
    if fallback:
        lines.append(f"  recover_fallback = {fallback}")
    if timeout:
        lines.append(f"  activation_timeout_s = {timeout}")
    if ns:
        lines.append(f"  naming.upper = {ns.broker_addr}")
    lines.append("  Service Svc {")
    for i, name in enumerate(children):
        host = f"127.0.0.{2 + i % 2}"
        lines.append(f"    Lpf {name} host={host} port={free_port(host)} {{")
        if ns:
            lines += [f"      Module Echo_{name} {{", "        impl = Echo", "        scope = GLOBAL",
                      "        domains = upper", "      }"]
        lines.append("    }")
    lines += ["  }", extra, "}"]
    return "\n".join(lines)


@pytest.fixture
def site(driver):
    return InlineSite(driver)


def test_master_and_two_children_all_succeed(driver, site):
    ns = NamingCluster(driver)
    rep = site.activate(three_lpf_config(site, ns))
    assert rep.verb == "ConfigReport"
    assert outcomes(rep) == {"ConfigurationMaster": SUCCESS, "c1": SUCCESS, "c2": SUCCESS}
    assert len(rep.body["entries"]) == 3
    for name in ("c1", "c2"):
        rec = ns.replica(0).get("upper", f"Echo_{name}")
        lpf = site.live()[name]
        assert rec.location == (lpf.host, lpf.port)


def test_only_master_parses(driver, site):
    site.activate(three_lpf_config(site))
    live = site.live()
    assert site.master.stats["parse_config"] == 1
    for name in ("c1", "c2"):
        assert live[name].stats.get("parse_config", 0) == 0
        assert live[name].modules["ConfigurationService"].subtree.name == name


@pytest.mark.parametrize("policy,fallback,master,child", [
    ("IGNORE", None, SUCCESS, IGNORED_FAILURE),
    ("FAIL", None, FAILED, FAILED),
    ("RECOVER", None, FAILED, FAILED),
    ("RECOVER", "IGNORE", SUCCESS, IGNORED_FAILURE),
])
def test_failure_policies_with_dead_bare(driver, site, policy, fallback, master, child):
    site.kill_bare("127.0.0.3")
    rep = site.activate(three_lpf_config(site, policy=policy, fallback=fallback, children=("c1", "c2", "c3")))
    got = outcomes(rep)
    assert got["ConfigurationMaster"] == master
    assert got["c2"] == child
    assert got["c1"] == got["c3"] == SUCCESS
    if master == FAILED:
        assert "c2" in rep.body["entries"][0]["cause"]


def test_recover_after_transient_failure(driver, site):
    text = three_lpf_config(site, policy="RECOVER")
    port = int(text.split("Lpf c1 host=127.0.0.2 port=")[1].split()[0])
    blocker = socket.socket()
    blocker.bind(("127.0.0.2", port))
    blocker.listen()
    bare = site.bares["127.0.0.2"].lpf
    from lpfarm.lpf.message import Message
    from lpfarm.lpf.tasks import Wait
    t = site.client.spawn((lambda: (yield Wait(Message("ActivateConfig", site.master_cs, Address(module="op"),
                                                      {"text": text}), 20)))())
    assert driver.run_until(lambda: any("PortInUse" in a.text for a in bare.alarms), 5)
    blocker.close()
    rep = driver.wait_task(t, 20)
    assert outcomes(rep)["c1"] == RECOVERED
    assert outcomes(rep)["ConfigurationMaster"] == SUCCESS


def test_silent_child_bounded_by_timeout(driver, site):
    silent = socket.socket()
    silent.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    silent.bind(("127.0.0.4", site.bare_port))
    silent.listen()
    text = three_lpf_config(site, policy="IGNORE", timeout=2, children=("c1",)).replace("127.0.0.2", "127.0.0.4")
    t0 = time.monotonic()
    rep = site.activate(text)
    elapsed = time.monotonic() - t0
    silent.close()
    assert outcomes(rep) == {"ConfigurationMaster": SUCCESS, "c1": IGNORED_FAILURE}
    assert "ActivationTimeout" in rep.body["entries"][1]["cause"]
    assert elapsed < 2 + 1


def test_config_rejected(driver, site):
    rep = site.activate("System X {\n  Service S {\n  }\n}\n")
    assert rep.verb == "Error" and rep.body["error"] == "ConfigRejected"


NESTED = """\
System Tree {{
  bare_port = {bp}
  Service Up {{
    Lpf top host=127.0.0.2 port={p1} {{
      Lpf mid host=127.0.0.3 port={p2} {{
        Lpf leaf host=127.0.0.2 port={p3} {{
          Module Recorder {{
          }}
        }}
      }}
    }}
  }}
  Service Down {{
    Lpf other host=127.0.0.3 port={p4} {{
    }}
  }}
}}
"""


def nested_text(site):
    return NESTED.format(bp=site.bare_port, p1=free_port("127.0.0.2"), p2=free_port("127.0.0.3"),
                         p3=free_port("127.0.0.2") + 1, p4=free_port("127.0.0.3") + 1)


def test_nested_activation_and_service_reap(driver, site):
    rep = site.activate(nested_text(site))
    assert outcomes(rep) == {"ConfigurationMaster": SUCCESS, "top": SUCCESS, "mid": SUCCESS,
                             "leaf": SUCCESS, "other": SUCCESS}
    assert "Recorder" in site.live()["leaf"].modules
    rr = site.reap("Up")
    assert rr.verb == "ReapReport" and rr.body["unreachable"] == []
    driver.run_for(0.3)
    live = site.live()
    assert "other" in live and not {"top", "mid", "leaf"} & set(live)
    assert "ConfigurationMaster" in live


def test_reap_all_then_reactivate(driver, site):
    text = nested_text(site)
    assert outcomes(site.activate(text))["ConfigurationMaster"] == SUCCESS
    rr = site.reap("ALL")
    assert rr.body["master_stopping"]
    driver.run_for(0.5)
    assert set(site.live()) == {"BareLPF", "operator"}
    site.new_master()
    again = site.activate(text)
    assert set(outcomes(again).values()) == {SUCCESS}


def test_unknown_scope(driver, site):
    site.activate(three_lpf_config(site))
    rr = site.reap("Nope")
    assert rr.verb == "Error" and rr.body["error"] == "UnknownScope"


def test_reap_with_unreachable_host(driver, site):
    site.activate(three_lpf_config(site))
    site.kill_bare("127.0.0.3")
    rr = site.reap("Svc")
    assert rr.body["unreachable"] == ["127.0.0.3"]
    assert rr.body["hosts"]["127.0.0.2"]["stopped"] == ["c1"]


def test_activate_subtree(driver, site):
    text = nested_text(site)
    site.activate(text)
    mid = site.live()["mid"]
    mid.stop()
    driver.run_for(0.3)
    rep = ask(driver, site.client, site.master_cs, "ActivateSubtree", {"path": "Tree/Up/top/mid"}, 20)
    assert rep.verb == "ConfigReport"
    assert outcomes(rep) == {"mid": SUCCESS, "leaf": SUCCESS}
    bad = ask(driver, site.client, site.master_cs, "ActivateSubtree", {"path": "Tree/Up/nope"})
    assert bad.body["error"] == "UnknownPath"


# -- bare spawn ----------------------------------------------------------------

def test_bare_spawn_and_port_in_use(driver, site):
    bare = Address("LocalLpfMap", host="127.0.0.2", port=site.bare_port)
    p1, p2 = free_port("127.0.0.2"), free_port("127.0.0.2") + 7
    ok = ask(driver, site.client, bare, "SpawnLpf", {"name": "x1", "port": p1, "marker": "S"})
    assert ok.verb == "LpfSpawned"
    st = ask(driver, site.client, Address("Lpf", host="127.0.0.2", port=p1), "LpfStatus")
    assert st.verb == "LpfStatusAnswer" and st.body["marker"] == "S"
    busy = ask(driver, site.client, bare, "SpawnLpf", {"name": "x2", "port": p1})
    assert busy.verb == "Error" and busy.body["error"] == "PortInUse"
    ok2 = ask(driver, site.client, bare, "SpawnLpf", {"name": "x3", "port": p2})
    assert ok2.verb == "LpfSpawned"
    listing = ask(driver, site.client, bare, "ListLocalLpfs")
    assert sorted((l["name"], l["port"]) for l in listing.body["lpfs"]) == [("x1", p1), ("x3", p2)]
