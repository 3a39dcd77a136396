"""Distributed activation and deactivation.

Every LPF carries a ``ConfigurationService``. The one that receives
``ActivateConfig`` parses the text and becomes the Configuration Master; it
is the virtual root of the activation tree, whose children are the
top-level Lpfs of every Service. Each parent asks the child host's BareLPF
to spawn the child, hands it its parsed subtree (``AnswerRequestConfig``)
and waits for its ``ConfigReport``. Children do the same for their own
children, so activation proceeds by induction down the tree.
"""
from __future__ import annotations

from ..lpf import registry
from ..lpf.activator import GLOBAL, activate, unregister
from ..lpf.core import ACTIVE, PASSIVE, Module, ModuleSpec
from ..lpf.errors import LpfError
from ..lpf.message import Address, Message, error_reply
from ..lpf.tasks import Join, Sleep, Wait, WaitAll
from .tree import (
    DEFAULT_ACTIVATION_TIMEOUT, FAIL, IGNORE, RECOVER, ConfigError, ConfigNode, default_bare_port,
    effective_settings, lpf_runtime_config, parse_config, subtree_for,
)

SUCCESS = "SUCCESS"
FAILED = "FAILED"
IGNORED_FAILURE = "IGNORED_FAILURE"
RECOVERED = "RECOVERED"
OK_OUTCOMES = (SUCCESS, RECOVERED)

RETRY_PAUSE = 0.2
BUDGET_MARGIN = 0.4
REAP_TIMEOUT = 8.0


def _policy(settings: dict) -> tuple[str, str]:
    return (str(settings.get("on_child_failure", FAIL)).upper(),
            str(settings.get("recover_fallback", FAIL)).upper())


def _timeout(settings: dict) -> float:
    return float(settings.get("activation_timeout_s", DEFAULT_ACTIVATION_TIMEOUT))


def _bare_port(settings: dict) -> int:
    return int(settings.get("bare_port", default_bare_port()))


def _entry(node: ConfigNode, outcome: str, cause: str | None = None, elapsed: float = 0.0) -> dict:
    return {"path": node.path, "name": node.name, "host": node.host, "port": node.port,
            "outcome": outcome, "cause": cause, "elapsed_s": round(elapsed, 4)}


def _unreached(node: ConfigNode, outcome: str, cause: str) -> list[dict]:
    """Entries for a child that never reported: it and all its descendants."""
    out = [_entry(node, outcome, cause)]
    for d in node.lpfs()[1:]:
        out.append(_entry(d, outcome, f"ancestor {node.name} not activated"))
    return out


def _service_of(path: str) -> str:
    parts = path.split("/")
    return parts[1] if len(parts) > 1 else ""


@registry.module_type("ConfigurationService")
class ConfigurationService(Module):
    """Verbs: ``ActivateConfig`` {text}, ``AnswerRequestConfig`` {subtree, budget_s},
    ``ActivateSubtree`` {path}, ``Reap`` {scope}, ``ConfigQuery``."""

    def init(self, config):
        self.tree = None
        self.subtree: ConfigNode | None = None
        self.last_report: dict | None = None

    def do(self, msg):
        verb = msg.verb
        if verb == "ActivateConfig":
            self.spawn(self._activate_config(msg), "activate-config")
        elif verb == "AnswerRequestConfig":
            self.spawn(self._configure_self(msg), "configure")
        elif verb in ("ActivateSubtree", "Reap"):
            if self.tree is None:
                return [error_reply(msg, "NoConfiguration", f"{self.lpf.name} holds no full configuration")]
            body = self._activate_subtree(msg) if verb == "ActivateSubtree" else self._reap(msg)
            self.spawn(body, verb)
        elif verb == "ConfigQuery":
            return [msg.reply("ConfigInfo", {
                "master": self.tree is not None,
                "system": self.tree.system if self.tree else None,
                "path": self.subtree.path if self.subtree else None,
                "parse_count": self.lpf.stats.get("parse_config", 0),
                "last_report": self.last_report,
            })]
        elif not msg.is_answer:
            return [error_reply(msg, "UnknownVerb", verb)]
        return None

    # -- master side ----------------------------------------------------------
    def _activate_config(self, msg):
        started = self.lpf.clock.now()
        self.lpf.stats["parse_config"] = self.lpf.stats.get("parse_config", 0) + 1
        try:
            tree = parse_config(msg.body.get("text", ""))
        except ConfigError as exc:
            self.lpf.post(error_reply(msg, "ConfigRejected", str(exc), rule=getattr(exc, "rule", None),
                                      line=getattr(exc, "line", None)))
            return
        self.tree = tree
        settings = dict(tree.root.settings)
        self.lpf.config.update(settings)
        deadline = started + _timeout(settings)
        children = [subtree_for(tree, n.path) for svc in tree.services() for n in svc.child_lpfs]
        entries, fatal, cause = yield from self._children(children, settings, deadline)
        outcome = FAILED if fatal else SUCCESS
        master = {"path": tree.system, "name": self.lpf.name, "host": self.lpf.host, "port": self.lpf.port,
                  "outcome": outcome, "cause": cause,
                  "elapsed_s": round(self.lpf.clock.now() - started, 4), "master": True}
        report = {"system": tree.system, "outcome": outcome, "entries": [master] + entries}
        self.last_report = report
        self.lpf.post(msg.reply("ConfigReport", report))

    def _activate_subtree(self, msg):
        started = self.lpf.clock.now()
        path = msg.body.get("path", "")
        try:
            node = self.tree.find(path)
            if node.kind != "Lpf":
                raise ConfigError(f"{path} is a {node.kind}, not an Lpf")
        except ConfigError as exc:
            self.lpf.post(error_reply(msg, "UnknownPath", str(exc)))
            return
        parent_path = path.rpartition("/")[0]
        parent = self.tree.find(parent_path)
        settings = effective_settings(self.tree, parent_path)
        if parent.kind == "Lpf":
            settings.update(parent.lpf_config)
        child = subtree_for(self.tree, path)
        deadline = started + _timeout(child.settings) + BUDGET_MARGIN
        entries, fatal, cause = yield from self._children([child], settings, deadline)
        outcome = FAILED if fatal or entries[0]["outcome"] not in OK_OUTCOMES else SUCCESS
        self.lpf.post(msg.reply("ConfigReport", {"system": self.tree.system, "outcome": outcome,
                                                 "path": path, "entries": entries}))

    # -- shared: activating children ------------------------------------------
    def _children(self, children: list[ConfigNode], settings: dict, deadline: float):
        """Activate ``children`` concurrently; returns (entries, fatal, cause)."""
        if not children:
            return [], False, None
        policy, fallback = _policy(settings)
        tasks = [self.spawn(self._child(c, policy, fallback, deadline), f"child:{c.name}") for c in children]
        left = deadline - self.lpf.clock.now()
        yield Join(tasks, timeout=max(left, 0.0))
        entries: list[dict] = []
        fatal, causes = False, []
        for c, t in zip(children, tasks):
            if not t.done:
                t.cancel()
                eff = fallback if policy == RECOVER else policy
                outcome = FAILED if eff == FAIL else IGNORED_FAILURE
                res = (_unreached(c, outcome, "ActivationTimeout"), eff == FAIL,
                       f"ActivationTimeout: {c.path}")
            elif t.error is not None:
                res = (_unreached(c, FAILED, repr(t.error)), policy != IGNORE, f"ChildFailure: {c.path}")
            else:
                res = t.result
            entries.extend(res[0])
            if res[1]:
                fatal = True
                causes.append(res[2])
        return entries, fatal, "; ".join(causes) or None

    def _child(self, c: ConfigNode, policy: str, fallback: str, deadline: float):
        entries, ok, cause = yield from self._attempt(c, deadline)
        if ok:
            return entries, False, None
        if policy == RECOVER:
            if self.lpf.clock.now() + RETRY_PAUSE < deadline:
                yield Sleep(RETRY_PAUSE)
                entries2, ok2, cause2 = yield from self._attempt(c, deadline)
                if ok2:
                    entries2[0]["outcome"] = RECOVERED
                    entries2[0]["cause"] = f"recovered after: {cause}"
                    return entries2, False, None
                if entries2 or not entries:
                    entries, cause = entries2, cause2
            policy = fallback
        outcome = FAILED if policy == FAIL else IGNORED_FAILURE
        if entries:
            entries[0]["outcome"] = outcome
            entries[0]["cause"] = entries[0].get("cause") or cause
        else:
            entries = _unreached(c, outcome, cause)
        return entries, policy == FAIL, f"ChildFailure: {c.path}: {cause}"

    def _attempt(self, c: ConfigNode, deadline: float):
        """Spawn one child through its host's BareLPF and configure it."""
        started = self.lpf.clock.now()
        left = deadline - started
        if left <= 0:
            return [], False, "ActivationTimeout"
        bare = Address("LocalLpfMap", host=c.host, port=_bare_port(c.settings))
        ans = yield Wait(Message("SpawnLpf", bare, self.address,
                                 {"name": c.name, "port": c.port, "marker": _service_of(c.path)}), left)
        if ans is None:
            return [], False, f"ActivationTimeout: BareLPF {c.host}:{bare.port} did not answer"
        if ans.verb == "Undeliverable":
            return [], False, f"BareLpfUnreachable: {ans.body.get('cause')}"
        if ans.verb == "Error":
            return [], False, f"{ans.body.get('error')}: {ans.body.get('text')}"
        left = deadline - self.lpf.clock.now()
        budget = max(0.1, min(_timeout(c.settings), left - BUDGET_MARGIN))
        target = Address("ConfigurationService", host=c.host, port=c.port)
        rep = yield Wait(Message("AnswerRequestConfig", target, self.address,
                                 {"subtree": c.to_dict(), "budget_s": budget}), max(left, 0.0))
        if rep is None:
            return [], False, f"ActivationTimeout: {c.name} did not report"
        if rep.verb != "ConfigReport":
            return [], False, f"{rep.body.get('error') or rep.verb}: {rep.body.get('text') or rep.body.get('cause')}"
        entries = rep.body["entries"]
        for e in entries:
            if e["path"] == c.path:
                e["elapsed_s"] = round(self.lpf.clock.now() - started, 4)
        return entries, rep.body["outcome"] in OK_OUTCOMES, rep.body.get("cause")

    # -- child side -----------------------------------------------------------
    def _configure_self(self, msg):
        started = self.lpf.clock.now()
        node = ConfigNode.from_dict(msg.body["subtree"])
        self.subtree = node
        deadline = started + float(msg.body.get("budget_s", _timeout(node.settings)))
        # LpfConfig keys land in the LPF's own config structure.
        self.lpf.config.update(lpf_runtime_config(node))
        outcome, cause = SUCCESS, None
        entries: list[dict] = []
        try:
            yield from self._load_modules(node)
        except (LpfError, ValueError, KeyError) as exc:
            outcome, cause = FAILED, f"ConfigRejected: {type(exc).__name__}: {exc}"
        if outcome == SUCCESS:
            entries, fatal, ccause = yield from self._children(node.child_lpfs, node.settings, deadline)
            if fatal:
                outcome, cause = FAILED, ccause
        else:
            for c in node.child_lpfs:
                entries.extend(_unreached(c, FAILED, cause))
        own = _entry(node, outcome, cause, self.lpf.clock.now() - started)
        report = {"outcome": outcome, "cause": cause, "entries": [own] + entries}
        self.last_report = report
        self.lpf.post(msg.reply("ConfigReport", report))

    def _load_modules(self, node: ConfigNode):
        for m in node.modules:
            if m.name in self.lpf.modules:
                continue
            impl = str(m.settings.get("impl", m.name))
            cfg = m.module_config()
            if m.module_scope() == GLOBAL:
                task = self.lpf.spawn(activate(self.lpf, m.name, cfg, GLOBAL, impl, m.module_domains()),
                                      f"activate:{m.name}")
                yield task
            else:
                kind = str(m.settings.get("kind", "")).lower()
                if not kind:
                    kind = getattr(registry.resolve(impl), "kind", PASSIVE)
                self.lpf.register_module(ModuleSpec(m.name, ACTIVE if kind == ACTIVE else PASSIVE, cfg, impl))

    # -- deactivation -----------------------------------------------------------
    def scope_nodes(self, scope: str) -> tuple[list[ConfigNode], list[str] | None, bool]:
        """Lpf nodes in ``scope``, the service filter and whether the master stops too."""
        tree = self.tree
        if scope in ("ALL", tree.system):
            return tree.lpfs(), None, True
        for svc in tree.services():
            if svc.name == scope:
                return svc.lpfs(), [scope], False
        raise ConfigError(f"unknown reap scope {scope!r}")

    def _reap(self, msg):
        scope = str(msg.body.get("scope", "ALL"))
        try:
            nodes, services, stop_self = self.scope_nodes(scope)
        except ConfigError as exc:
            self.lpf.post(error_reply(msg, "UnknownScope", str(exc)))
            return
        # 1. forget the services in naming
        jobs = []
        for n in nodes:
            eff = lpf_runtime_config(subtree_for(self.tree, n.path))
            for name, domains in n.services:
                for d in domains:
                    jobs.append(self.lpf.spawn(unregister(self.lpf, d, name, (n.host, n.port), 2.0, config=eff),
                                               f"unregister:{name}@{d}"))
        if jobs:
            yield Join(jobs, timeout=3.0)
        unregistered = sum(1 for t in jobs if t.done and t.error is None)
        naming_errors = [repr(t.error) if t.done else "timeout" for t in jobs if not t.done or t.error]
        # 2. ask every BareLPF in scope to stop its LPFs
        hosts: dict[str, int] = {}
        for n in nodes:
            hosts.setdefault(n.host, _bare_port(effective_settings(self.tree, n.path)))
        if stop_self:
            hosts.setdefault(self.lpf.host, _bare_port(self.tree.root.settings))
        order = sorted(hosts)
        asks = [Message("LocalLpfReaper", Address("LocalLpfMap", host=h, port=hosts[h]), self.address,
                        {"services": services, "exclude": [self.lpf.name]}) for h in order]
        answers = yield WaitAll(asks, timeout=REAP_TIMEOUT)
        per_host, unreachable = {}, []
        for h, a in zip(order, answers):
            if a is None or a.verb != "ReaperReport":
                unreachable.append(h)
                per_host[h] = {"reachable": False,
                               "cause": (a.body.get("cause") or a.body.get("text")) if a else "timeout"}
            else:
                per_host[h] = dict(a.body, reachable=True)
        report = {"scope": scope, "hosts": per_host, "unreachable": unreachable,
                  "unregistered": unregistered, "naming_errors": naming_errors,
                  "master_stopping": stop_self}
        self.lpf.post(msg.reply("ReapReport", report))
        if stop_self:
            yield Sleep(0.1)
            self.lpf.stop()
