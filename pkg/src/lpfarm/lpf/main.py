"""``lpf-run``: start one LPF in the foreground."""
from __future__ import annotations

import argparse
import json
import signal
import sys

from .core import POLICIES, LpfContext, ModuleSpec, ACTIVE, PASSIVE
from . import registry


def _kv(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except ValueError:
        return key, value


def build_parser():
    p = argparse.ArgumentParser(prog="lpf-run", description="Run a Lightweight Processing Framework instance.")
    p.add_argument("--name", default="lpf")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--marker", default="", help="service marker reported in status")
    p.add_argument("--module", action="append", default=[], metavar="NAME[:IMPL]",
                   help="load a module at startup (repeatable)")
    p.add_argument("--set", action="append", default=[], type=_kv, metavar="KEY=VALUE",
                   help="LpfConfig entry, e.g. naming.upper=127.0.0.1:4000/NamingService")
    p.add_argument("--policy", choices=POLICIES, default="DISCARD_ALARM")
    p.add_argument("--log", default=None, help="local log file")
    p.add_argument("--ready-fd", type=int, default=None, help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    lpf = LpfContext(args.name, args.host, args.port, marker=args.marker, policy=args.policy,
                     log_path=args.log, config=dict(args.set))
    for item in args.module:
        name, _, impl = item.partition(":")
        cls = registry.resolve(impl or name)
        kind = ACTIVE if getattr(cls, "kind", PASSIVE) == ACTIVE else PASSIVE
        lpf.register_module(ModuleSpec(name, kind, {}, impl or name))
    signal.signal(signal.SIGTERM, lambda *_: lpf.stop())
    if args.ready_fd is not None:
        import os
        os.write(args.ready_fd, b"ok\n")
        os.close(args.ready_fd)
    try:
        lpf.run()
    except KeyboardInterrupt:
        lpf.stop()
        lpf.loop_iteration()
    return 0


if __name__ == "__main__":
    sys.exit(main())
