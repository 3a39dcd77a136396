"""farmctl: single-shot commands and an interactive shell over the same command records."""
from __future__ import annotations

import argparse
import os
import shlex
import sys

from ..config.tree import default_bare_port
from .commands import (COMMAND_ERROR, DEFAULT_QUIET_S, OK, BadArgs, CliError, CommandInterface, Session,
                       UnknownCommand, _Parser, builtin_interfaces, execute, load_interface)

SHELL_ONLY = ("interface", "quit")
SINGLE_SHOT_ONLY = ("shell",)
SEARCH_ORDER = ("User", "Farm", "Debug")


def _hosts(text: str) -> list[str]:
    return [h for h in text.replace(" ", ",").split(",") if h]


def add_globals(p: argparse.ArgumentParser):
    p.add_argument("--hosts", type=_hosts, default=[], help="comma-separated hosts for discovery")
    p.add_argument("--config", help="configuration file (farm layout, master address)")
    p.add_argument("--interface", help="User, Farm, Debug or package.module:ATTR")
    p.add_argument("--timeout", type=float, default=5.0, help="seconds to wait for an answer")
    p.add_argument("--quiet", type=float, default=DEFAULT_QUIET_S,
                   help="quiet period closing multi-answer collection")
    p.add_argument("--refresh", type=float, default=1.0, help="monitor refresh period")
    p.add_argument("--master", help="Configuration Master host:port (or FARMCTL_MASTER)")
    p.add_argument("--bare-port", type=int, default=None, help="BareLPF port (default LPF_BARE_PORT or 34500)")


def build_parser(iface: CommandInterface) -> argparse.ArgumentParser:
    """The single-shot parser: global flags plus one subcommand per interface command."""
    p = _Parser(prog="farmctl", description=f"farm operator tool ({iface.name} interface)")
    add_globals(p)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, cmd in sorted(iface.commands.items()):
        sp = sub.add_parser(name, help=cmd.summary, description=cmd.summary)
        for a in cmd.args:
            a.add_to(sp)
    sub.add_parser("shell", help="interactive shell over the same commands")
    return p


def single_shot_commands(iface: CommandInterface) -> set[str]:
    sub = next(a for a in build_parser(iface)._actions if isinstance(a, argparse._SubParsersAction))
    return set(sub.choices) - set(SINGLE_SHOT_ONLY)


def shell_commands(iface: CommandInterface) -> set[str]:
    return set(Shell.dispatch_table(iface)) - set(SHELL_ONLY)


class Shell:
    """A line-oriented REPL. Errors are rendered and the loop goes on."""

    def __init__(self, session: Session, iface: CommandInterface, interfaces: dict, stdin=None):
        self.session = session
        self.iface = iface
        self.interfaces = interfaces
        self.stdin = stdin or sys.stdin
        self.last_code = OK

    @staticmethod
    def dispatch_table(iface: CommandInterface) -> dict:
        table = {name: "command" for name in iface.commands}
        table.update({name: "builtin" for name in SHELL_ONLY})
        return table

    def prompt(self):
        self.session.out.write(f"farmctl[{self.iface.name}]> ")
        self.session.out.flush()

    def handle(self, line: str) -> bool:
        """Run one line; False means the session is over."""
        try:
            words = shlex.split(line, comments=True)
        except ValueError as exc:
            self.session.write(f"error: BadArgs: {exc}")
            self.last_code = COMMAND_ERROR
            return True
        if not words:
            return True
        name, argv = words[0], words[1:]
        if name in ("quit", "exit"):
            return False
        if name == "interface":
            if not argv:
                self.session.write(f"interface {self.iface.name}; available: {', '.join(sorted(self.interfaces))}")
                return True
            try:
                self.iface = load_interface(argv[0], self.interfaces)
                self.session.interface = self.iface.name
                self.session.write(f"interface {self.iface.name}")
            except CliError as exc:
                self.session.write(f"error: {exc.kind}: {exc}")
            return True
        self.last_code = execute(self.session, self.iface, name, argv)
        return True

    def run(self) -> int:
        while True:
            self.prompt()
            try:
                line = self.stdin.readline()
            except KeyboardInterrupt:
                self.session.write("")
                continue
            if not line:
                self.session.write("")
                return OK
            try:
                if not self.handle(line):
                    return OK
            except KeyboardInterrupt:
                self.session.write("interrupted")


def _pick_interface(opts, command, interfaces) -> CommandInterface:
    if opts.interface:
        return load_interface(opts.interface, interfaces)
    for name in SEARCH_ORDER:
        if command in interfaces[name].commands:
            return interfaces[name]
    if command in (None, "shell"):
        return interfaces["User"]
    every = sorted({c for i in interfaces.values() for c in i.commands} | set(SINGLE_SHOT_ONLY))
    raise UnknownCommand(f"unknown command {command!r}; commands: {', '.join(every)}")


def _bare_port(opts, session) -> int:
    """--bare-port, then LPF_BARE_PORT, then the configuration, then the default."""
    if opts.bare_port is not None:
        return opts.bare_port
    if "LPF_BARE_PORT" not in os.environ and session.tree is not None:
        port = session.tree.root.settings.get("bare_port")
        if port:
            return int(port)
    return default_bare_port()


def main(argv: list[str] | None = None, stdin=None, out=None, client=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    interfaces = builtin_interfaces()

    # global flags may appear before or after the command word
    pre = argparse.ArgumentParser(add_help=False)
    add_globals(pre)
    pre.add_argument("command", nargs="?")
    try:
        opts, rest = pre.parse_known_args(argv)
    except SystemExit:
        return COMMAND_ERROR
    opts.rest = rest
    try:
        iface = _pick_interface(opts, opts.command, interfaces)
    except CliError as exc:
        out.write(f"error: {exc.kind}: {exc}\n")
        return exc.code

    parser = build_parser(iface)
    if opts.command is None:
        out.write(parser.format_help())
        return OK if "-h" in argv or "--help" in argv else COMMAND_ERROR
    session = Session(hosts=opts.hosts, config_path=opts.config, master=opts.master, timeout=opts.timeout,
                      quiet=opts.quiet, refresh=opts.refresh, bare_port=default_bare_port(), client=client,
                      out=out, interface=iface.name)
    try:
        session.bare_port = _bare_port(opts, session)
    except (OSError, ValueError) as exc:
        out.write(f"error: BadArgs: cannot read configuration {opts.config}: {exc}\n")
        return COMMAND_ERROR
    try:
        if opts.command == "shell":
            return Shell(session, iface, interfaces, stdin).run()
        if opts.command not in iface.commands:
            return execute(session, iface, opts.command, opts.rest)
        if "-h" in opts.rest or "--help" in opts.rest:
            out.write(iface.commands[opts.command].parser("farmctl ").format_help())
            return OK
        try:
            args = parser.parse_args([opts.command, *rest])
        except BadArgs as exc:
            out.write(f"error: {exc.kind}: {exc}\n")
            return exc.code
        return execute(session, iface, opts.command, opts.rest, args)
    except KeyboardInterrupt:
        return OK
    finally:
        if client is None:
            session.client.close()


if __name__ == "__main__":
    sys.exit(main())
