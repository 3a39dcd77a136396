"""Hierarchical configuration: System > Service > Lpf (> Lpf ...) > Module.

One item per line::

    # comment
    System Reco {
      bare_port = 34500
      Service PCfarm {
        Lpf server host=127.0.0.1 port=4100 {
          on_child_failure = IGNORE
          LpfConfig {
            naming.lower = 127.0.0.1:4200/NamingService
          }
          Module FarmManager {
            impl = FarmManager
            scope = GLOBAL
            domains = upper,lower
          }
          Lpf node01 host=127.0.0.2 port=4101 {
          }
        }
      }
    }
"""
from __future__ import annotations

import copy
import json
import os
import re
import socket
from dataclasses import dataclass, field
from typing import Any, Iterator

DEFAULT_BARE_PORT = 34500
BARE_PORT_ENV = "LPF_BARE_PORT"
DEFAULT_ACTIVATION_TIMEOUT = 20.0

FAIL, IGNORE, RECOVER = "FAIL", "IGNORE", "RECOVER"
POLICIES = (FAIL, IGNORE, RECOVER)
MODULE_KEYS = ("impl", "scope", "domains", "domain", "kind")


def default_bare_port() -> int:
    return int(os.environ.get(BARE_PORT_ENV, DEFAULT_BARE_PORT))


class ConfigError(Exception):
    pass


class ConfigSyntaxError(ConfigError):
    def __init__(self, line: int, column: int, text: str, message: str):
        super().__init__(f"line {line}, column {column}: {message}: {text.strip()!r}")
        self.line = line
        self.column = column
        self.text = text


class ValidationError(ConfigError):
    def __init__(self, node: str, rule: str, message: str = ""):
        super().__init__(f"{node}: {rule}" + (f" ({message})" if message else ""))
        self.node = node
        self.rule = rule


class UnknownPath(ConfigError):
    pass


@dataclass
class ConfigNode:
    kind: str
    name: str
    settings: dict[str, Any] = field(default_factory=dict)
    children: list[ConfigNode] = field(default_factory=list)
    host: str | None = None
    port: int | None = None
    lpf_config: dict[str, Any] = field(default_factory=dict)
    line: int = 0
    path: str = ""

    def walk(self) -> Iterator[ConfigNode]:
        yield self
        for c in self.children:
            yield from c.walk()

    def lpfs(self) -> list[ConfigNode]:
        return [n for n in self.walk() if n.kind == "Lpf"]

    @property
    def child_lpfs(self) -> list[ConfigNode]:
        return [c for c in self.children if c.kind == "Lpf"]

    @property
    def modules(self) -> list[ConfigNode]:
        return [c for c in self.children if c.kind == "Module"]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name, "settings": self.settings, "path": self.path,
             "children": [c.to_dict() for c in self.children]}
        if self.kind == "Lpf":
            d.update(host=self.host, port=self.port, lpf_config=self.lpf_config)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ConfigNode:
        return cls(kind=d["kind"], name=d["name"], settings=dict(d.get("settings", {})),
                   children=[cls.from_dict(c) for c in d.get("children", [])],
                   host=d.get("host"), port=d.get("port"), lpf_config=dict(d.get("lpf_config", {})),
                   path=d.get("path", ""))

    # Structural equality ignores source line numbers.
    def __eq__(self, other):
        if not isinstance(other, ConfigNode):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    # -- module helpers ---------------------------------------------------
    def module_scope(self) -> str:
        return str(self.settings.get("scope", "LOCAL")).upper()

    def module_domains(self) -> list[str]:
        raw = self.settings.get("domains", self.settings.get("domain", ""))
        if isinstance(raw, list):
            return [str(x) for x in raw]
        return [d.strip() for d in str(raw).split(",") if d.strip()]

    def module_config(self) -> dict:
        return {k: v for k, v in self.settings.items() if k not in MODULE_KEYS}

    @property
    def services(self) -> list[tuple[str, list[str]]]:
        """GLOBAL services hosted by this Lpf: (name, domains)."""
        return [(m.name, m.module_domains()) for m in self.modules if m.module_scope() == "GLOBAL"]


@dataclass
class ConfigTree:
    root: ConfigNode

    @property
    def system(self) -> str:
        return self.root.name

    def node_count(self) -> int:
        return sum(1 for _ in self.root.walk())

    def lpfs(self) -> list[ConfigNode]:
        return self.root.lpfs()

    def services(self) -> list[ConfigNode]:
        return [c for c in self.root.children if c.kind == "Service"]

    def find(self, path: str) -> ConfigNode:
        for n in self.root.walk():
            if n.path == path:
                return n
        raise UnknownPath(f"no configuration node at {path!r}")

    def service_of(self, node: ConfigNode) -> str | None:
        parts = node.path.split("/")
        return parts[1] if len(parts) > 1 else None

    def to_dict(self):
        return self.root.to_dict()


# -- parsing ------------------------------------------------------------------

_HEADER = re.compile(r"^(System|Service|Lpf|Module|LpfConfig)\b\s*(.*?)\s*\{$")
_KV = re.compile(r"^([A-Za-z_][\w.\-]*)\s*=\s*(.*)$")
_ATTR = re.compile(r"(\w+)=(\S+)")
_NAME = re.compile(r"^[A-Za-z_][\w.\-]*$")

_ALLOWED_IN = {
    None: ("System",),
    "System": ("Service",),
    "Service": ("Lpf",),
    "Lpf": ("Lpf", "Module", "LpfConfig"),
    "Module": (),
    "LpfConfig": (),
}


def parse_value(text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    if text in ("true", "false"):
        return text == "true"
    if text and (text[0] in "[{" or re.fullmatch(r"-?\d+(\.\d+)?([eE][-+]?\d+)?", text)):
        try:
            return json.loads(text)
        except ValueError:
            pass
    return text


def _strip_comment(line: str) -> str:
    if line.lstrip().startswith("#"):
        return ""
    m = re.search(r"\s#", line)
    return line[: m.start()] if m else line


def parse_config(text: str, validate: bool = True, check_hosts: bool = True) -> ConfigTree:
    """Parse and (by default) validate a configuration text."""
    stack: list[ConfigNode] = []
    roots: list[ConfigNode] = []
    last_line = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        last_line = lineno
        line = _strip_comment(raw).strip()
        if not line:
            continue
        col = len(raw) - len(raw.lstrip()) + 1
        if line == "}":
            if not stack:
                raise ConfigSyntaxError(lineno, col, raw, "unbalanced closing brace")
            stack.pop()
            continue
        parent = stack[-1] if stack else None
        m = _HEADER.match(line)
        if m:
            kind, rest = m.group(1), m.group(2)
            allowed = _ALLOWED_IN[parent.kind if parent else None]
            if kind not in allowed:
                where = parent.kind if parent else "top level"
                raise ConfigSyntaxError(lineno, col, raw, f"{kind} section not allowed in {where}")
            if kind == "LpfConfig":
                if rest:
                    raise ConfigSyntaxError(lineno, col, raw, "LpfConfig takes no name")
                node = ConfigNode("LpfConfig", "LpfConfig", line=lineno)
                node.settings = parent.lpf_config
                stack.append(node)
                continue
            name, _, attrs = rest.partition(" ")
            if not _NAME.match(name or ""):
                raise ConfigSyntaxError(lineno, col, raw, f"bad or missing {kind} name")
            node = ConfigNode(kind, name, line=lineno)
            if kind == "Lpf":
                found = dict(_ATTR.findall(attrs))
                leftover = _ATTR.sub("", attrs).strip()
                if leftover or set(found) - {"host", "port"}:
                    raise ConfigSyntaxError(lineno, col, raw, "Lpf header takes host=<h> port=<p>")
                if "host" not in found or "port" not in found:
                    raise ConfigSyntaxError(lineno, col, raw, "Lpf needs host= and port=")
                if not found["port"].isdigit():
                    raise ConfigSyntaxError(lineno, col, raw, "port must be an integer")
                node.host, node.port = found["host"], int(found["port"])
            elif attrs.strip():
                raise ConfigSyntaxError(lineno, col, raw, f"unexpected text after {kind} name")
            node.path = f"{parent.path}/{name}" if parent else name
            if parent:
                parent.children.append(node)
            else:
                roots.append(node)
            stack.append(node)
            continue
        m = _KV.match(line)
        if m:
            if parent is None:
                raise ConfigSyntaxError(lineno, col, raw, "setting outside any section")
            key, value = m.group(1), parse_value(m.group(2))
            if key in parent.settings:
                raise ConfigSyntaxError(lineno, col, raw, f"key {key!r} set twice")
            parent.settings[key] = value
            continue
        raise ConfigSyntaxError(lineno, col, raw, "expected 'key = value', a section header or '}'")
    if stack:
        raise ConfigSyntaxError(last_line + 1, 1, "", f"unclosed section {stack[-1].kind} {stack[-1].name}")
    if len(roots) != 1:
        raise ValidationError("<config>", "SingleSystem", f"found {len(roots)} System sections, need exactly one")
    tree = ConfigTree(roots[0])
    if validate:
        validate_config(tree, check_hosts=check_hosts)
    return tree


# -- inheritance --------------------------------------------------------------

def _inheritable(node: ConfigNode) -> dict:
    d = dict(node.settings)
    if node.kind == "Lpf":
        d.update(node.lpf_config)
    return d


def _resolve(node: ConfigNode, inherited: dict) -> ConfigNode:
    out = copy.copy(node)
    if node.kind == "Module":
        out.settings = dict(node.settings)
        out.children = []
        return out
    merged = dict(inherited)
    merged.update(node.settings)
    out.settings = merged
    out.lpf_config = dict(node.lpf_config)
    below = dict(inherited)
    below.update(_inheritable(node))
    out.children = [_resolve(c, below) for c in node.children]
    return out


def effective_settings(tree: ConfigTree, path: str) -> dict:
    """Settings of the node at ``path`` with ancestors' keys merged in (child wins)."""
    parts = path.split("/")
    merged: dict = {}
    node = tree.root
    if node.name != parts[0]:
        raise UnknownPath(path)
    chain = [node]
    for name in parts[1:]:
        nxt = [c for c in node.children if c.name == name and c.kind != "Module"]
        if not nxt:
            raise UnknownPath(path)
        node = nxt[0]
        chain.append(node)
    for n in chain[:-1]:
        merged.update(_inheritable(n))
    merged.update(chain[-1].settings)
    return merged


def subtree_for(tree: ConfigTree, lpf_path: str) -> ConfigNode:
    node = tree.find(lpf_path)
    if node.kind == "Module":
        raise UnknownPath(f"{lpf_path} is a module, not a subtree")
    parent_path = lpf_path.rpartition("/")[0]
    inherited: dict = {}
    if parent_path:
        inherited = effective_settings(tree, parent_path)
        parent = tree.find(parent_path)
        inherited.update(parent.lpf_config if parent.kind == "Lpf" else {})
    return _resolve(node, inherited)


def lpf_runtime_config(node: ConfigNode) -> dict:
    """What a resolved Lpf node copies into its LPF's config structure."""
    d = dict(node.settings)
    d.update(node.lpf_config)
    return d


# -- validation ---------------------------------------------------------------

_host_cache: dict[str, bool] = {}


def _resolvable(host: str) -> bool:
    if host not in _host_cache:
        try:
            socket.getaddrinfo(host, None)
            _host_cache[host] = True
        except OSError:
            _host_cache[host] = False
    return _host_cache[host]


def validate_config(tree: ConfigTree, check_hosts: bool = True, known_impl=None):
    """Raise ValidationError for the first broken rule, naming the node."""
    root = tree.root
    if root.kind != "System":
        raise ValidationError(root.path, "RootIsSystem")
    for node in root.walk():
        seen = set()
        for c in node.children:
            if (c.kind, c.name) in seen:
                raise ValidationError(c.path, "DuplicateName", f"{c.kind} {c.name} defined twice in {node.path}")
            seen.add((c.kind, c.name))
    names: dict[str, str] = {}
    locations: dict[tuple[str, int], str] = {}
    if known_impl is None:
        from ..lpf import registry
        known_impl = registry.known
    for svc in tree.services():
        if not svc.child_lpfs:
            raise ValidationError(svc.path, "EmptyService", "a Service needs at least one Lpf")
    for lpf in tree.lpfs():
        if lpf.name in names:
            raise ValidationError(lpf.path, "DuplicateName", f"Lpf {lpf.name} also defined at {names[lpf.name]}")
        names[lpf.name] = lpf.path
        eff = effective_settings(tree, lpf.path)
        eff_runtime = dict(eff)
        eff_runtime.update(lpf.lpf_config)
        bare = int(eff.get("bare_port", default_bare_port()))
        if not 1 <= lpf.port <= 65535:
            raise ValidationError(lpf.path, "PortRange", f"port {lpf.port} outside 1..65535")
        if lpf.port == bare:
            raise ValidationError(lpf.path, "BarePortClash", f"port {lpf.port} is the BareLPF port of {lpf.host}")
        key = (lpf.host, lpf.port)
        if key in locations:
            raise ValidationError(lpf.path, "DuplicateLocation",
                                  f"{lpf.host}:{lpf.port} already used by {locations[key]}")
        locations[key] = lpf.path
        if check_hosts and not _resolvable(lpf.host):
            raise ValidationError(lpf.path, "UnresolvableHost", lpf.host)
        pol = str(eff.get("on_child_failure", FAIL)).upper()
        if pol not in POLICIES:
            raise ValidationError(lpf.path, "BadPolicy", f"on_child_failure={pol}")
        fb = str(eff.get("recover_fallback", FAIL)).upper()
        if fb not in (FAIL, IGNORE):
            raise ValidationError(lpf.path, "BadPolicy", f"recover_fallback={fb}")
        try:
            t = float(eff.get("activation_timeout_s", DEFAULT_ACTIVATION_TIMEOUT))
        except (TypeError, ValueError):
            t = -1
        if t <= 0:
            raise ValidationError(lpf.path, "BadTimeout", f"activation_timeout_s={eff.get('activation_timeout_s')}")
        for mod in lpf.modules:
            impl = str(mod.settings.get("impl", mod.name))
            if not known_impl(impl):
                raise ValidationError(mod.path, "UnknownImplementation", impl)
            scope = mod.module_scope()
            if scope not in ("LOCAL", "GLOBAL"):
                raise ValidationError(mod.path, "BadScope", scope)
            kind = str(mod.settings.get("kind", "")).lower()
            if kind not in ("", "active", "passive"):
                raise ValidationError(mod.path, "BadKind", kind)
            if scope == "GLOBAL":
                doms = mod.module_domains()
                if not doms:
                    raise ValidationError(mod.path, "MissingDomain", "GLOBAL module needs domains=")
                for d in doms:
                    if not eff_runtime.get(f"naming.{d}"):
                        raise ValidationError(mod.path, "DanglingReference", f"no naming.{d} for domain {d}")
    root_pol = str(root.settings.get("on_child_failure", FAIL)).upper()
    if root_pol not in POLICIES:
        raise ValidationError(root.path, "BadPolicy", f"on_child_failure={root_pol}")
    return True


def render_config(tree: ConfigTree) -> str:
    """Print a tree back in the file syntax."""
    out: list[str] = []

    def val(v):
        if isinstance(v, str):
            return v
        return json.dumps(v)

    def emit(node: ConfigNode, depth: int):
        pad = "  " * depth
        head = f"{node.kind} {node.name}"
        if node.kind == "Lpf":
            head += f" host={node.host} port={node.port}"
        out.append(f"{pad}{head} {{")
        for k, v in node.settings.items():
            out.append(f"{pad}  {k} = {val(v)}")
        if node.kind == "Lpf" and node.lpf_config:
            out.append(f"{pad}  LpfConfig {{")
            for k, v in node.lpf_config.items():
                out.append(f"{pad}    {k} = {val(v)}")
            out.append(f"{pad}  }}")
        for c in node.children:
            emit(c, depth + 1)
        out.append(f"{pad}}}")

    emit(tree.root, 0)
    return "\n".join(out) + "\n"
