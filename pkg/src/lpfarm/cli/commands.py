"""Command interfaces for farmctl: User, Farm and Debug rosters.

A command is a small declarative record (argument schema, how to find
its target, the verb it sends) plus a handler. Single-shot mode and the
shell both build their parsers from the same records, so whatever one
mode can run, the other can too.
"""
from __future__ import annotations

import argparse
import importlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable

from ..config.tree import DEFAULT_ACTIVATION_TIMEOUT, default_bare_port, parse_config
from ..lpf.errors import RemoteUnreachable
from ..lpf.message import Address
from ..net.client import Client, ClientTimeout
from . import render
from .discovery import discover

OK, COMMAND_ERROR, TRANSPORT_ERROR = 0, 1, 2
DEFAULT_QUIET_S = 0.5

# Verbs that only read state. The monitor is restricted to these.
QUERY_VERBS = frozenset({"FarmStatus", "FarmHistory", "FsmQuery", "FsmTrace", "LpfStatus", "Ping", "Alarms",
                         "ListLocalLpfs", "BkGet", "BkCatalog", "BkHistory", "NsLookup", "NsServers",
                         "ConfigQuery", "QueryStatus", "ListProcesses", "FetchOutput", "NextRun", "CheckRun"})


class CliError(Exception):
    kind = "CommandError"
    code = COMMAND_ERROR


class UnknownCommand(CliError):
    kind = "UnknownCommand"


class BadArgs(CliError):
    kind = "BadArgs"


class NoTarget(CliError):
    kind = "NoTarget"


class Timeout(CliError):
    kind = "Timeout"
    code = TRANSPORT_ERROR


class Unreachable(CliError):
    kind = "Unreachable"
    code = TRANSPORT_ERROR


@dataclass
class Arg:
    name: str
    help: str = ""
    type: Callable = str
    required: bool = True
    default: object = None
    choices: tuple | None = None
    nargs: str | None = None
    flag: bool = False    # --name, a boolean switch
    option: bool = False  # --name VALUE

    def add_to(self, parser: argparse.ArgumentParser):
        if self.flag:
            parser.add_argument(f"--{self.name}", action="store_true", help=self.help)
        elif self.option:
            parser.add_argument(f"--{self.name}", type=self.type, default=self.default, help=self.help)
        elif self.required:
            parser.add_argument(self.name, type=self.type, choices=self.choices, nargs=self.nargs, help=self.help)
        else:
            parser.add_argument(self.name, type=self.type, choices=self.choices, default=self.default,
                                nargs=self.nargs or "?", help=self.help)


@dataclass
class Command:
    name: str
    summary: str
    handler: Callable
    args: list[Arg] = field(default_factory=list)
    target: str = "none"      # none | explicit | farm | master | hosts | naming
    verb: str | None = None   # the verb template the command sends, if one

    def parser(self, prog: str = "") -> argparse.ArgumentParser:
        p = _Parser(prog=f"{prog}{self.name}".strip(), description=self.summary, add_help=False)
        for a in self.args:
            a.add_to(p)
        return p

    def usage(self) -> str:
        return self.parser().format_usage().strip()


class _Parser(argparse.ArgumentParser):
    """Raises BadArgs instead of exiting, so the shell survives a typo."""

    def error(self, message):
        raise BadArgs(f"{message}\n{self.format_usage().strip()}")


@dataclass
class CommandInterface:
    name: str
    description: str
    commands: dict[str, Command] = field(default_factory=dict)

    def add(self, cmd: Command):
        if cmd.name in self.commands:
            raise ValueError(f"interface {self.name}: duplicate command {cmd.name}")
        self.commands[cmd.name] = cmd
        return cmd

    def get(self, name: str) -> Command:
        try:
            return self.commands[name]
        except KeyError:
            raise UnknownCommand(f"unknown command {name!r} in interface {self.name}; "
                                 f"try: {', '.join(sorted(self.commands))}") from None


# -- session ------------------------------------------------------------------

@dataclass
class Session:
    """Everything a command needs: where things are and how to talk to them."""

    hosts: list[str] = field(default_factory=list)
    config_path: str | None = None
    master: str | None = None
    timeout: float = 5.0
    quiet: float = DEFAULT_QUIET_S
    refresh: float = 1.0
    bare_port: int = field(default_factory=default_bare_port)
    client: Client | None = None
    out: object = None
    interface: str = "User"

    def __post_init__(self):
        if self.client is None:
            self.client = Client("farmctl")
        self._tree = None

    def write(self, text: str):
        if text:
            self.out.write(text if text.endswith("\n") else text + "\n")
            self.out.flush()

    @property
    def tree(self):
        if self._tree is None and self.config_path:
            with open(self.config_path, encoding="utf-8") as fh:
                self._tree = parse_config(fh.read())
        return self._tree

    # -- transport -------------------------------------------------------
    def ask(self, dest: Address, verb: str, body: dict | None = None, quiet: float | None = None,
            timeout: float | None = None):
        timeout = self.timeout if timeout is None else timeout
        try:
            if quiet is None:
                return [self.client.request(dest, verb, body, timeout=timeout)]
            return self.client.request(dest, verb, body, timeout=timeout, quiet=quiet)
        except ClientTimeout as exc:
            raise Timeout(str(exc)) from None
        except RemoteUnreachable as exc:
            raise Unreachable(str(exc)) from None

    def ask_one(self, dest: Address, verb: str, body: dict | None = None):
        return self.ask(dest, verb, body)[0]

    # -- target resolution ---------------------------------------------------
    def master_timeout(self) -> float:
        """Long enough for the master to hit its own activation deadline and still report."""
        limit = DEFAULT_ACTIVATION_TIMEOUT
        if self.tree is not None:
            limit = float(self.tree.root.settings.get("activation_timeout_s", limit))
        return max(self.timeout, limit + 5.0)

    def master_address(self) -> Address:
        text = self.master or os.environ.get("FARMCTL_MASTER")
        if not text and self.tree is not None:
            text = self.tree.root.settings.get("master")
        if not text:
            raise NoTarget("no Configuration Master: use --master host:port (or FARMCTL_MASTER)")
        return _with_module(text, "ConfigurationService")

    def farms(self) -> dict[str, Address]:
        """FarmManager addresses by pass and by module name, from the config or by discovery."""
        found: dict[str, Address] = {}
        if self.tree is not None:
            for lpf in self.tree.lpfs():
                for m in lpf.modules:
                    if str(m.settings.get("impl", m.name)) == "FarmManager":
                        addr = Address(m.name, host=lpf.host, port=lpf.port)
                        found[m.name] = addr
                        found[str(m.settings.get("pass", "")).upper()] = addr
        elif self.hosts:
            for host in discover(self.hosts, self.bare_port, self.timeout, client=self.client).hosts:
                for entry in host.lpfs:
                    for mod in entry.get("modules", []):
                        if mod.startswith("FarmManager"):
                            addr = Address(mod, host=host.host, port=entry["port"])
                            found[mod] = addr
                            found.setdefault(mod[len("FarmManager"):].upper(), addr)
        return found

    def farm_address(self, name: str | None) -> Address:
        if name and "/" in name:
            return Address.parse(name)
        farms = self.farms()
        if not name:
            uniq = {str(a): a for a in farms.values()}
            if len(uniq) == 1:
                return next(iter(uniq.values()))
            raise NoTarget("several farms (or none) known; name one: " + ", ".join(sorted(farms)) if farms
                           else "no farm found: give host:port/FarmManagerX, --config or --hosts")
        addr = farms.get(name) or farms.get(name.upper())
        if addr is None:
            raise NoTarget(f"no farm {name!r}; known: {', '.join(sorted(farms)) or 'none'}")
        return addr

    def upper_service(self, impl: str) -> Address:
        if self.tree is not None:
            for lpf in self.tree.lpfs():
                for m in lpf.modules:
                    if str(m.settings.get("impl", m.name)) == impl:
                        return Address(m.name, host=lpf.host, port=lpf.port)
        raise NoTarget(f"no {impl} service known: use --config")


def _with_module(text: str, module: str) -> Address:
    return Address.parse(text if "/" in text else f"{text}/{module}")


def _kv_pairs(items) -> dict:
    body = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise BadArgs(f"expected key=value, got {item!r}")
        try:
            body[key] = json.loads(value)
        except ValueError:
            body[key] = value
    return body


def _check(answers) -> list:
    for a in answers:
        if a.verb in ("Error", "Undeliverable"):
            raise CliError(f"{a.body.get('error', a.verb)}: {a.body.get('text') or a.body.get('cause', '')}".strip())
    return answers


# -- handlers -------------------------------------------------------------------

def cmd_help(s: Session, a, iface: CommandInterface):
    s.write(render.help_text(iface))


def cmd_discover(s: Session, a, iface):
    hosts = a.host or s.hosts
    s.write(render.discovery(discover(hosts, s.bare_port, s.timeout, client=s.client)))


def cmd_farm_status(s: Session, a, iface):
    ans = _check(s.ask(s.farm_address(a.farm), "FarmStatus"))
    s.write(render.farm_status(ans[0].body))


def cmd_start_run(s: Session, a, iface):
    body = {"rerun": bool(a.rerun)}
    if a.run_id is not None:
        body["run_id"] = a.run_id
    ans = _check(s.ask(s.farm_address(a.farm), "StartRun", body))
    b = ans[0].body
    s.write(f"started {b['pass']} run {b['run_id']} (RunProcessing instance {b.get('instance')})")


def cmd_abort_run(s: Session, a, iface):
    ans = _check(s.ask(s.farm_address(a.farm), "AbortRun"))
    s.write(f"abort requested for run {ans[0].body.get('run_id')}")


def cmd_set_auto(s: Session, a, iface):
    ans = _check(s.ask(s.farm_address(a.farm), "SetAuto", {"auto": a.mode == "on"}))
    s.write(f"automatic scheduling {'on' if ans[0].body['auto'] else 'off'}")


def cmd_farm_history(s: Session, a, iface):
    ans = _check(s.ask(s.farm_address(a.farm), "FarmHistory"))
    s.write(render.farm_history(ans[0].body))


def cmd_stage_run(s: Session, a, iface):
    ans = _check(s.ask(s.upper_service("Stager"), "StageRun", {"run_id": a.run_id, "events": a.events}))
    s.write(f"staged run {ans[0].body['run_id']}: {ans[0].body['xtc_path']}")


def cmd_catalog(s: Session, a, iface):
    body = {"pass": a.pass_type.upper()} if a.pass_type else {}
    ans = _check(s.ask(s.upper_service("Bookkeeping"), "BkCatalog", body))
    s.write(render.catalog(ans[0].body["records"]))


def cmd_activate(s: Session, a, iface):
    path = a.config or s.config_path
    if not path:
        raise BadArgs("activate needs a configuration file")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    ans = _check(s.ask(s.master_address(), "ActivateConfig", {"text": text}, timeout=s.master_timeout()))
    s.write(render.report(ans[0].body))
    if ans[0].body.get("outcome") not in ("SUCCESS", "RECOVERED"):
        raise CliError(f"activation {ans[0].body.get('outcome')}")


def cmd_activate_subtree(s: Session, a, iface):
    ans = _check(s.ask(s.master_address(), "ActivateSubtree", {"path": a.path}, timeout=s.master_timeout()))
    s.write(render.report(ans[0].body))


def cmd_reap(s: Session, a, iface):
    ans = _check(s.ask(s.master_address(), "Reap", {"scope": a.scope}, timeout=s.master_timeout()))
    s.write(render.report(ans[0].body))


def cmd_list_lpfs(s: Session, a, iface):
    ans = _check(s.ask(Address("LocalLpfMap", host=a.host, port=s.bare_port), "ListLocalLpfs"))
    s.write(render.lpf_list(ans[0].body))


def _addr(text: str, module: str) -> Address:
    try:
        return _with_module(text, module)
    except ValueError as exc:
        raise BadArgs(str(exc)) from None


def cmd_lpf_status(s: Session, a, iface):
    ans = _check(s.ask(_addr(a.target, "Lpf"), "LpfStatus"))
    s.write(render.kv(ans[0].body))


def cmd_ping(s: Session, a, iface):
    t0 = time.monotonic()
    ans = _check(s.ask(_addr(a.target, "Lpf"), "Ping"))
    s.write(f"{ans[0].body.get('name')} answered in {1000 * (time.monotonic() - t0):.1f} ms")


def cmd_alarms(s: Session, a, iface):
    ans = _check(s.ask(_addr(a.target, "Lpf"), "Alarms"))
    s.write(render.alarms(ans[0].body.get("alarms", [])[-a.last:]))


def cmd_fsm_query(s: Session, a, iface):
    ans = _check(s.ask(Address.parse(a.target), "FsmQuery"))
    s.write(render.kv(ans[0].body))


def cmd_fsm_trace(s: Session, a, iface):
    ans = _check(s.ask(Address.parse(a.target), "FsmTrace"))
    s.write("\n".join(" ".join(str(x) for x in rec if x is not None) for rec in ans[0].body["trace"]))


def cmd_fsm_transition(s: Session, a, iface):
    ans = _check(s.ask(Address.parse(a.target), "FsmTransition",
                       {"transition": a.transition, "payload": _kv_pairs(a.payload)}))
    s.write(render.kv(ans[0].body))


def cmd_lookup(s: Session, a, iface):
    ans = _check(s.ask(_addr(a.broker, "NamingService"), "NsLookup", {"domain": a.domain, "name": a.name}))
    s.write(render.kv(ans[0].body))


def cmd_send(s: Session, a, iface):
    dest = _addr(f"{a.target}/{a.module}", a.module)
    answers = s.ask(dest, a.verb, _kv_pairs(a.body), quiet=s.quiet)
    for m in answers:
        s.write(render.message(m))
    _check(answers)


def cmd_monitor(s: Session, a, iface):
    from .monitor import FarmTarget, Monitor
    names = a.farm or []
    if names:
        fms = [s.farm_address(n) for n in names]
    else:
        fms = list({str(v): v for v in s.farms().values()}.values())
    if not fms:
        raise NoTarget("no farms to monitor: name them, or give --config/--hosts")
    mon = Monitor([FarmTarget(fm) for fm in fms], client=s.client, out=s.out, refresh_s=s.refresh,
                  timeout=min(s.timeout, 2.0))
    try:
        mon.run(iterations=a.count)
    except KeyboardInterrupt:
        pass


# -- rosters ------------------------------------------------------------------

_FARM = Arg("farm", "farm: PC, ER, FarmManager name or host:port/Module", required=False)
_HOSTS = Arg("host", "hosts to query (default --hosts)", required=False, nargs="*")
_TARGET = Arg("target", "host:port of an LPF")


def _user_commands():
    return [
        Command("help", "list the commands of this interface", cmd_help),
        Command("discover", "find LPFs through the BareLPF on each host", cmd_discover, [_HOSTS], "hosts",
                "ListLocalLpfs"),
        Command("farm-status", "state of a farm and its current run", cmd_farm_status, [_FARM], "farm",
                "FarmStatus"),
        Command("start-run", "process a run (the next eligible one unless given)", cmd_start_run,
                [Arg("farm", "PC, ER or an address"), Arg("run_id", "run number", type=int, required=False),
                 Arg("rerun", "allow reprocessing a DONE run", flag=True)], "farm", "StartRun"),
        Command("abort-run", "abort the run in progress", cmd_abort_run, [_FARM], "farm", "AbortRun"),
        Command("monitor", "continuously show the farms", cmd_monitor,
                [Arg("farm", "farms to watch (default: all known)", nargs="*", required=False),
                 Arg("count", "stop after N refreshes", type=int, option=True)], "farm", "FarmStatus"),
        Command("stage-run", "stage a run's XTC file and catalog it", cmd_stage_run,
                [Arg("run_id", "run number", type=int), Arg("events", "events in the run", type=int)], "naming",
                "StageRun"),
        Command("catalog", "runs known to bookkeeping", cmd_catalog,
                [Arg("pass_type", "PC or ER", required=False)], "naming", "BkCatalog"),
    ]


def _farm_commands():
    return [
        Command("help", "list the commands of this interface", cmd_help),
        Command("activate", "activate a configuration through the Configuration Master", cmd_activate,
                [Arg("config", "configuration file (default --config)", required=False)], "master",
                "ActivateConfig"),
        Command("activate-subtree", "(re)activate one LPF subtree by path", cmd_activate_subtree,
                [Arg("path", "System/Service/Lpf path")], "master", "ActivateSubtree"),
        Command("reap", "stop LPFs: ALL, host:<h>, or a service name", cmd_reap, [Arg("scope", "reap scope")],
                "master", "Reap"),
        Command("discover", "find LPFs through the BareLPF on each host", cmd_discover, [_HOSTS], "hosts",
                "ListLocalLpfs"),
        Command("list-lpfs", "the LPFs one BareLPF has spawned", cmd_list_lpfs, [Arg("host", "host name")],
                "hosts", "ListLocalLpfs"),
        Command("lpf-status", "status of one LPF", cmd_lpf_status, [_TARGET], "explicit", "LpfStatus"),
        Command("farm-status", "state of a farm and its current run", cmd_farm_status, [_FARM], "farm",
                "FarmStatus"),
        Command("farm-history", "runs a farm has finished", cmd_farm_history, [_FARM], "farm", "FarmHistory"),
        Command("start-run", "process a run (the next eligible one unless given)", cmd_start_run,
                [Arg("farm", "PC, ER or an address"), Arg("run_id", "run number", type=int, required=False),
                 Arg("rerun", "allow reprocessing a DONE run", flag=True)], "farm", "StartRun"),
        Command("abort-run", "abort the run in progress", cmd_abort_run, [_FARM], "farm", "AbortRun"),
        Command("set-auto", "switch automatic run scheduling", cmd_set_auto,
                [Arg("farm", "PC, ER or an address"), Arg("mode", "on or off", choices=("on", "off"))], "farm",
                "SetAuto"),
        Command("monitor", "continuously show the farms", cmd_monitor,
                [Arg("farm", "farms to watch (default: all known)", nargs="*", required=False),
                 Arg("count", "stop after N refreshes", type=int, option=True)], "farm", "FarmStatus"),
    ]


def _debug_commands():
    return [
        Command("help", "list the commands of this interface", cmd_help),
        Command("send", "send any message to any module: send host:port Module Verb key=value ...", cmd_send,
                [_TARGET, Arg("module", "module name"), Arg("verb", "message verb"),
                 Arg("body", "key=value (values parsed as JSON when possible)", nargs="*", required=False)],
                "explicit", "*"),
        Command("ping", "round trip to an LPF", cmd_ping, [_TARGET], "explicit", "Ping"),
        Command("lpf-status", "status of one LPF", cmd_lpf_status, [_TARGET], "explicit", "LpfStatus"),
        Command("alarms", "recent alarms of an LPF", cmd_alarms,
                [_TARGET, Arg("last", "how many", type=int, required=False, default=20)], "explicit", "Alarms"),
        Command("fsm-query", "state and dwell of an FSM module", cmd_fsm_query,
                [Arg("target", "host:port/Module")], "explicit", "FsmQuery"),
        Command("fsm-trace", "normalized trace of an FSM module", cmd_fsm_trace,
                [Arg("target", "host:port/Module")], "explicit", "FsmTrace"),
        Command("fsm-transition", "inject a transition", cmd_fsm_transition,
                [Arg("target", "host:port/Module"), Arg("transition", "transition name"),
                 Arg("payload", "key=value", nargs="*", required=False)], "explicit", "FsmTransition"),
        Command("lookup", "resolve a service through a naming broker", cmd_lookup,
                [Arg("broker", "host:port[/Module] of the broker"), Arg("domain", "naming domain"),
                 Arg("name", "service name")], "explicit", "NsLookup"),
        Command("discover", "find LPFs through the BareLPF on each host", cmd_discover, [_HOSTS], "hosts",
                "ListLocalLpfs"),
    ]


def builtin_interfaces() -> dict[str, CommandInterface]:
    out = {}
    for name, desc, cmds in (("User", "run-level operation of the farms", _user_commands()),
                             ("Farm", "deployment and farm control", _farm_commands()),
                             ("Debug", "raw messages and FSM internals", _debug_commands())):
        iface = CommandInterface(name, desc)
        for c in cmds:
            iface.add(c)
        out[name] = iface
    return out


def load_interface(spec: str, known: dict[str, CommandInterface]) -> CommandInterface:
    """A built-in interface by name, or ``package.module:ATTRIBUTE`` loaded at run time."""
    if spec in known:
        return known[spec]
    if ":" in spec:
        mod_name, _, attr = spec.partition(":")
        try:
            obj = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError) as exc:
            raise UnknownCommand(f"cannot load interface {spec}: {exc}") from None
        iface = obj() if callable(obj) and not isinstance(obj, CommandInterface) else obj
        if not isinstance(iface, CommandInterface):
            raise UnknownCommand(f"{spec} is not a CommandInterface")
        known[iface.name] = iface
        return iface
    raise UnknownCommand(f"no interface {spec!r}; available: {', '.join(sorted(known))}")


def execute(session: Session, iface: CommandInterface, name: str, argv: list[str], args=None) -> int:
    """Run one command; errors are rendered, and the exit code returned."""
    try:
        cmd = iface.get(name)
        if args is None:
            args = cmd.parser().parse_args(argv)
        cmd.handler(session, args, iface)
        return OK
    except CliError as exc:
        session.write(f"error: {exc.kind}: {exc}")
        if isinstance(exc, UnknownCommand):
            session.write(render.help_text(iface))
        return exc.code
    except (OSError, ValueError) as exc:
        session.write(f"error: {type(exc).__name__}: {exc}")
        return COMMAND_ERROR
