from __future__ import annotations

import io
import socket
import sys
import types

import pytest

from lpfarm.cli import render
from lpfarm.cli.commands import (QUERY_VERBS, CommandInterface, Command, Session, UnknownCommand,
                                 builtin_interfaces, load_interface)
from lpfarm.cli.discovery import discover
from lpfarm.cli.main import SHELL_ONLY, build_parser, main, shell_commands, single_shot_commands
from lpfarm.cli.monitor import FarmTarget, Monitor
from lpfarm.config.bare import BareLpf
from lpfarm.lpf.core import LpfContext, ModuleSpec
from lpfarm.lpf.message import Address
from lpfarm.net.client import Client

from conftest import free_port


def run(argv, stdin_text=None):
    out = io.StringIO()
    code = main(argv, stdin=io.StringIO(stdin_text) if stdin_text is not None else None, out=out)
    return code, out.getvalue()


@pytest.fixture
def live(driver):
    """Driver running in the background so the blocking CLI client can talk to it."""
    driver.start()
    yield driver
    driver.stop()


@pytest.fixture
def echo_lpf(live):
    lpf = LpfContext("echo", "127.0.0.1", 0)
    lpf.register_module(ModuleSpec("Echo"))
    live.call(live.add, lpf)
    return lpf


@pytest.fixture
def silent_port():
    """Accepts connections (through the backlog) and never answers."""
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen(8)
    yield s.getsockname()[1]
    s.close()


# -- structure ------------------------------------------------------------------

@pytest.mark.parametrize("name", ["User", "Farm", "Debug"])
def test_command_set_parity(name):
    iface = builtin_interfaces()[name]
    assert single_shot_commands(iface) == shell_commands(iface) == set(iface.commands)


def test_published_subcommands_reachable_single_shot():
    reachable = set()
    for iface in builtin_interfaces().values():
        reachable |= single_shot_commands(iface) | {"shell"}
    assert {"discover", "send", "shell", "monitor", "activate", "reap", "start-run", "farm-status"} <= reachable


def test_every_command_declares_a_known_target_rule():
    for iface in builtin_interfaces().values():
        for cmd in iface.commands.values():
            assert cmd.target in ("none", "explicit", "farm", "master", "hosts", "naming"), cmd.name
            cmd.parser()  # argument schema builds


def test_duplicate_command_rejected():
    iface = CommandInterface("X", "x")
    iface.add(Command("a", "a", lambda *a: None))
    with pytest.raises(ValueError):
        iface.add(Command("a", "again", lambda *a: None))


def test_interface_loaded_at_run_time(monkeypatch):
    mod = types.ModuleType("site_iface")
    iface = CommandInterface("Site", "site specific")
    iface.add(Command("help", "list", lambda s, a, i: s.write("site help")))
    mod.make = lambda: iface
    monkeypatch.setitem(sys.modules, "site_iface", mod)
    known = builtin_interfaces()
    assert load_interface("site_iface:make", known) is iface and "Site" in known
    with pytest.raises(UnknownCommand):
        load_interface("Nope", known)
    code, out = run(["--interface", "site_iface:make", "help"])
    assert code == 0 and "site help" in out


def test_monitor_uses_query_verbs_only():
    assert {"FarmStatus", "FsmQuery", "Alarms"} <= QUERY_VERBS
    assert not {"StartRun", "AbortRun", "SetAuto", "FsmTransition"} & QUERY_VERBS


# -- shell ----------------------------------------------------------------------

def test_shell_help_quit():
    code, out = run(["shell"], "help\nquit\n")
    assert code == 0
    for name in builtin_interfaces()["User"].commands:
        assert name in out


def test_shell_switch_interface():
    code, out = run(["shell"], "interface Debug\nhelp\nquit\n")
    assert code == 0
    debug_help = out.split("interface Debug\n", 1)[1]
    assert "fsm-transition" in debug_help and "send" in debug_help


def test_shell_survives_timeout(silent_port):
    code, out = run(["--timeout", "0.3", "--interface", "Debug", "shell"],
                    f"ping 127.0.0.1:{silent_port}\nhelp\nquit\n")
    assert code == 0
    assert "error: Timeout" in out
    after = out.split("error: Timeout", 1)[1]
    assert "farmctl[Debug]>" in after and "Debug interface" in after


def test_shell_survives_bad_lines():
    code, out = run(["shell"], "nonsense\nstart-run\n'unclosed\ninterface Bogus\nquit\n")
    assert code == 0
    assert "UnknownCommand" in out and "BadArgs" in out
    assert out.count("farmctl[User]>") == 5


def test_shell_eof_ends_cleanly():
    assert run(["shell"], "help\n")[0] == 0


# -- single shot ----------------------------------------------------------------

def test_unknown_command_gives_usage():
    code, out = run(["frobnicate"])
    assert code == 1 and "UnknownCommand" in out and "farm-status" in out
    code, out = run(["--interface", "Debug", "farm-status"])
    assert code == 1 and "UnknownCommand" in out and "Debug interface" in out


def test_bad_args_give_usage():
    code, out = run(["start-run"])
    assert code == 1 and "BadArgs" in out and "usage: farmctl start-run" in out
    code, out = run(["--interface", "Farm", "set-auto", "PC", "sometimes"])
    assert code == 1 and "invalid choice" in out


def test_timeout_exit_code(silent_port):
    code, out = run(["--timeout", "0.3", "ping", f"127.0.0.1:{silent_port}"])
    assert code == 2 and "Timeout" in out


def test_unreachable_exit_code():
    code, out = run(["--interface", "Debug", "lpf-status", f"127.0.0.1:{free_port()}"])
    assert code == 2 and "Unreachable" in out


def test_no_target():
    code, out = run(["farm-status"])
    assert code == 1 and "NoTarget" in out
    code, out = run(["--interface", "Farm", "reap", "ALL"])
    assert code == 1 and "NoTarget" in out


def test_flags_after_command(echo_lpf):
    code, out = run(["ping", f"127.0.0.1:{echo_lpf.port}", "--timeout", "2"])
    assert code == 0 and "echo answered" in out


def test_raw_send(echo_lpf):
    code, out = run(["send", f"127.0.0.1:{echo_lpf.port}", "Echo", "Hello", "x=1", "who=ops", 'l=[1,2]',
                     "--quiet", "0.2"])
    assert code == 0, out
    assert "<- Echoed from Echo" in out
    assert "x    1" in out and "who  ops" in out and "l    [1, 2]" in out
    assert echo_lpf.modules["Echo"].seen[-1].body == {"x": 1, "who": "ops", "l": [1, 2]}


def test_send_to_missing_module_times_out(echo_lpf):
    # the remote LPF drops it with an alarm; the sender just hears nothing
    code, out = run(["--timeout", "0.5", "send", f"127.0.0.1:{echo_lpf.port}", "NoSuchModule", "Hello"])
    assert code == 2 and "error: Timeout" in out
    assert any("NoSuchModule" in a.text for a in echo_lpf.alarms)


def test_send_error_answer_is_command_error(echo_lpf):
    code, out = run(["send", f"127.0.0.1:{echo_lpf.port}", "Lpf", "NoSuchVerb"])
    assert code == 1 and "<- Error" in out and "UnknownVerb" in out


def test_lpf_status_and_alarms(echo_lpf):
    code, out = run(["--interface", "Debug", "lpf-status", f"127.0.0.1:{echo_lpf.port}"])
    assert code == 0 and "modules" in out and "Echo" in out
    code, out = run(["--interface", "Debug", "alarms", f"127.0.0.1:{echo_lpf.port}"])
    assert code == 0


def test_master_from_environment(monkeypatch):
    monkeypatch.setenv("FARMCTL_MASTER", "127.0.0.1:9")
    s = Session(out=io.StringIO())
    assert s.master_address() == Address("ConfigurationService", host="127.0.0.1", port=9)
    s.master = "127.0.0.2:10"
    assert s.master_address().host == "127.0.0.2"
    s.client.close()


def test_master_commands_outwait_activation(tmp_path):
    # a 5 s answer timeout would give up before a 20 s activation deadline reports
    s = Session(out=io.StringIO(), timeout=5.0)
    assert s.master_timeout() == 25.0
    conf = tmp_path / "f.conf"
    conf.write_text("System S {\n  activation_timeout_s = 2\n  Service A {\n"
                    "    Lpf a host=127.0.0.1 port=41999 {\n    }\n  }\n}\n")
    s.config_path = str(conf)
    assert s.master_timeout() == 7.0
    s.timeout = 60.0
    assert s.master_timeout() == 60.0
    s.client.close()


# -- discovery ------------------------------------------------------------------

def _bare(live, host, port):
    bare = BareLpf(host, port, mode="inline")
    live.call(live.add, bare.lpf)
    return bare


def test_discover_no_hosts():
    res = discover([], 1)
    assert res.hosts == [] and res.entries == []
    code, out = run(["discover"])
    assert code == 0 and "no hosts" in out


def test_discover_one_host_two_lpfs(live):
    port = free_port()
    _bare(live, "127.0.0.1", port)
    with Client() as c:
        for name, marker in (("a", "SvcA"), ("b", "SvcB")):
            ans = c.request(Address("LocalLpfMap", host="127.0.0.1", port=port), "SpawnLpf",
                            {"name": name, "port": free_port(), "marker": marker})
            assert ans.verb == "LpfSpawned"
    res = discover(["127.0.0.1"], port, timeout_s=2)
    assert sorted((e["name"], e["marker"]) for e in res.entries) == [("a", "SvcA"), ("b", "SvcB")]
    assert all("Lpf" in e["modules"] for e in res.entries)
    code, out = run(["discover", "127.0.0.1", "--bare-port", str(port)])
    assert code == 0 and "2 LPF(s)" in out and "SvcA" in out


def test_discover_live_and_dead(live):
    port = free_port()
    _bare(live, "127.0.0.1", port)
    res = discover(["127.0.0.1", "127.0.0.9"], port, timeout_s=1)
    assert res.unreachable == ["127.0.0.9"]
    assert res.hosts[0].reachable and res.hosts[0].lpfs == []
    code, out = run(["--hosts", "127.0.0.1,127.0.0.9", "--bare-port", str(port), "discover"])
    assert code == 0 and "127.0.0.9: unreachable" in out


def test_bare_port_from_environment(live, monkeypatch):
    port = free_port()
    _bare(live, "127.0.0.1", port)
    monkeypatch.setenv("LPF_BARE_PORT", str(port))
    code, out = run(["--interface", "Farm", "list-lpfs", "127.0.0.1"])
    assert code == 0 and f"BareLPF 127.0.0.1:{port}" in out


# -- monitor --------------------------------------------------------------------

def test_monitor_with_no_reachable_farms():
    sent = []
    client = Client("mon", observer=sent.append)
    targets = [FarmTarget(Address(f"FarmManager{p}", host="127.0.0.1", port=free_port())) for p in ("PC", "ER")]
    out = io.StringIO()
    mon = Monitor(targets, client=client, out=out, refresh_s=0.05, timeout=0.3)
    mon.run(iterations=3)
    client.close()
    frames = out.getvalue().split("----\n")[1:]
    assert len(frames) == 3
    assert all(f.count("unreachable") == 2 for f in frames)
    assert {m.verb for m in sent} <= QUERY_VERBS


def test_monitor_command_with_dead_farm():
    code, out = run(["monitor", f"127.0.0.1:{free_port()}/FarmManagerPC", "--count", "2", "--refresh", "0.05",
                     "--timeout", "0.3"])
    assert code == 0 and out.count("unreachable") == 2


# -- rendering ------------------------------------------------------------------

def test_render_reports():
    act = {"system": "S", "outcome": "PARTIAL", "entries": [
        {"path": "S/A/x", "name": "x", "host": "h", "port": 1, "outcome": "SUCCESS", "cause": "", "elapsed_s": 0.1},
        {"path": "S/A/y", "name": "y", "host": "h", "port": 2, "outcome": "FAILED", "cause": "Timeout",
         "elapsed_s": 3}]}
    text = render.report(act)
    assert text.splitlines()[0] == "S: PARTIAL" and "Timeout" in text
    reap = {"scope": "ALL", "hosts": {"h1": {"reachable": True, "stopped": ["a"], "killed": [], "remaining": []},
                                      "h2": {"reachable": False}},
            "unreachable": ["h2"], "unregistered": 3, "naming_errors": [], "master_stopping": False}
    text = render.report(reap)
    assert "3 registration(s)" in text and "h2" in text and "unreachable" in text


def test_render_farm_status_handles_missing_rp():
    body = {"pass": "PC", "phase": "IDLE", "run_id": None, "auto": False, "upper": "upper", "lower": "pc",
            "rp": None, "nodes": [{"name": "n1", "reachable": False}], "history": []}
    text = render.farm_status(body)
    assert "RunProcessing  unreachable" in text and "n1:unreachable" in text


def test_shell_only_builtins_not_in_single_shot():
    for iface in builtin_interfaces().values():
        sub = [a for a in build_parser(iface)._actions if a.dest == "command"][0]
        assert not set(SHELL_ONLY) & set(sub.choices)
