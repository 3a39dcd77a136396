"""Scriptable stand-in for an external worker process."""
from __future__ import annotations

import argparse
import sys
import time


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="mock-worker", description="Print lines, sleep, hang or exit on demand.")
    p.add_argument("--lines", type=int, default=0, help="stdout lines to print")
    p.add_argument("--stderr-lines", type=int, default=0)
    p.add_argument("--interval", type=float, default=0.0, help="pause between lines")
    p.add_argument("--stamp", action="store_true", help="append a wall-clock timestamp to each line")
    p.add_argument("--sleep", type=float, default=0.0, help="sleep before exiting")
    p.add_argument("--exit-code", type=int, default=0)
    p.add_argument("--hang", action="store_true", help="never print, never exit")
    args = p.parse_args(argv)
    if args.hang:
        while True:
            time.sleep(3600)
    for i in range(args.lines):
        line = f"line {i}"
        if args.stamp:
            line += f" {time.time():.4f}"
        print(line, flush=args.interval > 0)
        if args.interval:
            time.sleep(args.interval)
    for i in range(args.stderr_lines):
        print(f"err {i}", file=sys.stderr)
    sys.stdout.flush()
    if args.sleep:
        time.sleep(args.sleep)
    return args.exit_code


if __name__ == "__main__":
    sys.exit(main())
