"""Mock Logging Manager: serves contiguous event ranges of one XTC file."""
from __future__ import annotations

import argparse
import selectors
import signal
import socket
import sys
import time

from . import lmproto
from .staging import read_events, read_header


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="mock-lm", description="Serve a synthetic XTC file to mock Elves.")
    p.add_argument("--xtc", required=True)
    p.add_argument("--nodes", required=True, help="comma separated node names")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--idle-timeout", type=float, default=600.0, help="give up when nobody talks for this long")
    args = p.parse_args(argv)

    run_id, total = read_header(args.xtc)
    events = read_events(args.xtc)
    if len(events) != total:
        print(f"LM error header says {total} events, file has {len(events)}", flush=True)
        return 2
    nodes = [n for n in args.nodes.split(",") if n]
    ranges = lmproto.split_ranges(total, nodes)
    done: dict[str, int] = {}

    srv = socket.create_server((args.host, args.port))
    sel = selectors.DefaultSelector()
    sel.register(srv, selectors.EVENT_READ)
    stop = []
    signal.signal(signal.SIGTERM, lambda *_: stop.append(1))
    host, port = srv.getsockname()[:2]
    print(f"LM ready run={run_id} events={total} nodes={len(nodes)} address={host}:{port}", flush=True)
    last = time.monotonic()
    while not stop and len(done) < len(nodes):
        if time.monotonic() - last > args.idle_timeout:
            print("LM idle timeout", flush=True)
            return 3
        for key, _ in sel.select(0.2):
            last = time.monotonic()
            if key.fileobj is srv:
                conn, _ = srv.accept()
                sel.register(conn, selectors.EVENT_READ)
                continue
            conn = key.fileobj
            try:
                m = lmproto.recv(conn)
            except OSError:
                m = None
            if m is None:
                sel.unregister(conn)
                conn.close()
                continue
            node = m.body.get("node")
            if node not in ranges:
                lmproto.send(conn, "Error", {"error": "UnknownNode", "node": node}, "LoggingManager", m)
                continue
            first, count = ranges[node]
            if m.verb == "GetEvents":
                off = int(m.body.get("offset", 0))
                n = max(0, min(lmproto.CHUNK, count - off))
                lmproto.send(conn, "EventRange", {"node": node, "first": first + off, "count": n,
                                                  "remaining": count - off - n,
                                                  "events": events[first + off:first + off + n]},
                             "LoggingManager", m)
                if off == 0:
                    print(f"LM serving node={node} first={first} count={count}", flush=True)
            elif m.verb == "Done":
                done[node] = int(m.body.get("processed", 0))
                print(f"LM node={node} done processed={done[node]}", flush=True)
                lmproto.send(conn, "Ack", {"node": node}, "LoggingManager", m)
    served = sum(done.values())
    print(f"LM finished run={run_id} served={served} nodes_done={len(done)}", flush=True)
    return 0 if len(done) == len(nodes) else 1


if __name__ == "__main__":
    sys.exit(main())
