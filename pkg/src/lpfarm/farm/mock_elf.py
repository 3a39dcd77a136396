"""Mock Elf: 'reconstructs' events and prints a parseable summary line."""
from __future__ import annotations

import argparse
import os
import socket
import sys
import time

from . import lmproto

LOCK = "elf.lock"


def _events_from_lm(address: str, node: str):
    host, port = address.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=10) as sock:
        off = 0
        while True:
            lmproto.send(sock, "GetEvents", {"node": node, "offset": off}, f"Elf_{node}")
            ans = lmproto.recv(sock)
            if ans is None or ans.verb != "EventRange":
                raise RuntimeError(f"bad answer from LM: {ans}")
            if off == 0:
                print(f"range first={ans.body['first']} count={ans.body['count'] + ans.body['remaining']}", flush=True)
            yield from ans.body["events"]
            off += ans.body["count"]
            if ans.body["remaining"] <= 0:
                return


def _report_done(address: str, node: str, processed: int):
    host, port = address.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=10) as sock:
        lmproto.send(sock, "Done", {"node": node, "processed": processed}, f"Elf_{node}")
        lmproto.recv(sock)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="mock-elf", description="Stand-in reconstruction process.")
    p.add_argument("--events", type=int, default=0, help="events to process when no LM is given")
    p.add_argument("--lm", default=None, help="host:port of the Logging Manager")
    p.add_argument("--node", default="node")
    p.add_argument("--fail-at", type=int, default=None, help="crash after this many events")
    p.add_argument("--hang", action="store_true", help="hold the lock and never finish")
    p.add_argument("--event-time", type=float, default=0.0, help="seconds per event")
    p.add_argument("--workdir", default=".")
    args = p.parse_args(argv)

    os.makedirs(args.workdir, exist_ok=True)
    lock = os.path.join(args.workdir, LOCK)
    with open(lock, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    print(f"elf node={args.node} pid={os.getpid()} started", flush=True)
    if args.hang:
        while True:
            time.sleep(3600)
    source = _events_from_lm(args.lm, args.node) if args.lm else (f"EVT {i} local" for i in range(args.events))
    processed = 0
    first = None
    for ev in source:
        if args.fail_at is not None and processed >= args.fail_at:
            print(f"elf crash at event {processed}", file=sys.stderr, flush=True)
            return 3
        seq = int(ev.split()[1])
        first = seq if first is None else first
        if args.event_time:
            time.sleep(args.event_time)
        processed += 1
    if args.fail_at is not None and processed >= args.fail_at:
        print(f"elf crash at event {processed}", file=sys.stderr, flush=True)
        return 3
    if args.lm:
        _report_done(args.lm, args.node, processed)
    os.remove(lock)
    print(f"processed {processed} events first={first if first is not None else -1}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
