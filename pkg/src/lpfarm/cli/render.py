"""Plain-text renderers shared by every farmctl mode."""
from __future__ import annotations

import json
import time


def _v(value) -> str:
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True)
    return str(value)


def kv(body: dict, indent: str = "") -> str:
    width = max((len(k) for k in body), default=0)
    return "\n".join(f"{indent}{k.ljust(width)}  {_v(v)}" for k, v in body.items())


def message(m) -> str:
    return f"<- {m.verb} from {m.source.module}\n" + kv(m.body, "   ")


def help_text(iface) -> str:
    lines = [f"{iface.name} interface: {iface.description}"]
    width = max(len(c) for c in iface.commands)
    for name in sorted(iface.commands):
        cmd = iface.commands[name]
        lines.append(f"  {name.ljust(width)}  {cmd.summary}")
    lines.append("shell only: interface <name>, quit")
    return "\n".join(lines)


def discovery(result) -> str:
    if not result.hosts:
        return "no hosts given"
    out = []
    for h in result.hosts:
        if not h.reachable:
            out.append(f"{h.host}: unreachable ({h.error})")
            continue
        out.append(f"{h.host}: {len(h.lpfs)} LPF(s)")
        for e in h.lpfs:
            mods = ",".join(m for m in e["modules"] if m not in ("Lpf", "ConfigurationService"))
            state = "degraded" if e.get("degraded") else "ok"
            out.append(f"  {e['name']:<16} port {e['port']:<6} {state:<8} {e.get('marker') or '-':<10} {mods}")
        for e in h.silent:
            out.append(f"  {e['name']:<16} port {e['port']:<6} not answering")
    return "\n".join(out)


def node_summary(nodes) -> str:
    parts = []
    for n in nodes:
        if isinstance(n, str):
            parts.append(n)
        elif not n.get("reachable"):
            parts.append(f"{n['name']}:unreachable")
        else:
            parts.append(f"{n['name']}:{n.get('state') or 'idle'}")
    return " ".join(parts) or "-"


def farm_status(b: dict) -> str:
    rp = b.get("rp")
    lines = [f"farm {b['pass']}  phase {b['phase']}  run {b.get('run_id') or '-'}  "
             f"auto {'on' if b.get('auto') else 'off'}  domains {b.get('upper')}/{b.get('lower')}"]
    if rp:
        lines.append(f"  RunProcessing  {rp.get('state') or '-'} ({rp.get('status')})  dwell {rp.get('dwell_s', 0):.1f}s"
                     f"  instance {rp.get('instance')}")
    else:
        lines.append("  RunProcessing  unreachable")
    lines.append(f"  nodes  {node_summary(b.get('nodes', []))}")
    for h in b.get("history", [])[-5:]:
        lines.append(f"  run {h.get('run_id')}: {h.get('status')} {h.get('events', 0)} events"
                     f"{'  ' + h['cause'] if h.get('cause') else ''}")
    return "\n".join(lines)


def farm_history(b: dict) -> str:
    lines = [f"farm {b['pass']}: {len(b['runs'])} finished run(s)"]
    for h in b["runs"]:
        lines.append(f"  run {h.get('run_id')}: {h.get('status')} {h.get('events', 0)} events"
                     f"{'  ' + h['cause'] if h.get('cause') else ''}")
    return "\n".join(lines)


def catalog(records) -> str:
    if not records:
        return "catalog is empty"
    lines = [f"{'run':>6} {'pass':<4} {'status':<10} {'cal':<3} {'events':>13}  cause"]
    for r in records:
        lines.append(f"{r['run_id']:>6} {r['pass_type']:<4} {r['status']:<10} {'yes' if r['calibrated'] else 'no':<3} "
                     f"{r['events_processed']:>6}/{r['events_total']:<6}  {r.get('cause', '')}")
    return "\n".join(lines)


def report(b: dict) -> str:
    if "entries" in b:
        lines = [f"{b.get('system', '')}: {b['outcome']}"]
        for e in b["entries"]:
            lines.append(f"  {e['path']:<40} {e['outcome']:<16} {e.get('cause') or ''}")
        return "\n".join(lines)
    if "hosts" in b:
        lines = [f"reap {b['scope']}: {len(b['hosts'])} host(s), {b.get('unregistered', 0)} registration(s) removed"]
        for host, h in sorted(b["hosts"].items()):
            if not h.get("reachable", True):
                lines.append(f"  {host:<16} unreachable")
                continue
            lines.append(f"  {host:<16} stopped {','.join(h.get('stopped', [])) or '-'}"
                         + (f"  killed {','.join(h['killed'])}" if h.get("killed") else "")
                         + (f"  remaining {','.join(h['remaining'])}" if h.get("remaining") else ""))
        for e in b.get("naming_errors", []):
            lines.append(f"  naming: {e}")
        if b.get("master_stopping"):
            lines.append("  the Configuration Master is stopping too")
        return "\n".join(lines)
    return kv(b)


def lpf_list(b: dict) -> str:
    lines = [f"BareLPF {b['host']}:{b['bare_port']}"]
    for c in b["lpfs"]:
        lines.append(f"  {c['name']:<16} port {c['port']:<6} pid {c['pid']:<8} {'alive' if c.get('alive') else 'exited'}")
    return "\n".join(lines)


def alarms(items) -> str:
    return "\n".join(f"{time.strftime('%H:%M:%S', time.localtime(a['timestamp']))} {a['level']:<7} "
                     f"{a['origin']}: {a['text']}" for a in items) or "no alarms"
