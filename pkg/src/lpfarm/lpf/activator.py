"""ModuleActivator: local loading and transparent handling of global services."""
from __future__ import annotations

from .errors import NamingUnavailable, UnknownModule
from .message import LOCAL, Address, Message
from .tasks import Sleep, Wait

GLOBAL = "GLOBAL"
NAMING_TIMEOUT = 3.0
RETRY_PAUSE = 0.1


def broker_address(lpf, domain: str, config: dict | None = None) -> Address:
    """Where the naming broker of ``domain`` lives, from ``naming.<domain>``."""
    spec = (lpf.config if config is None else config).get(f"naming.{domain}")
    if not spec:
        raise NamingUnavailable(f"no naming service configured for domain {domain!r}")
    return Address.parse(str(spec), domain=domain)


def naming_call(lpf, domain: str, verb: str, body: dict, timeout: float = NAMING_TIMEOUT,
                origin: str = "ModuleActivator", config: dict | None = None):
    """Task helper: send a naming request, retrying until an answer or ``timeout``.

    Returns the answer message; raises NamingUnavailable when nobody answered.
    """
    broker = broker_address(lpf, domain, config)
    deadline = lpf.clock.now() + timeout
    last = "no answer"
    while True:
        left = deadline - lpf.clock.now()
        if left <= 0:
            break
        q = Message(verb, broker, Address(module=origin), dict(body, domain=domain))
        answer = yield Wait(q, min(left, 1.0))
        if answer is not None and answer.verb != "Undeliverable":
            return answer
        last = answer.body.get("cause") if answer is not None else "timeout"
        if lpf.clock.now() + RETRY_PAUSE >= deadline:
            break
        yield Sleep(RETRY_PAUSE)
    raise NamingUnavailable(f"{verb} in domain {domain} failed: {last}")


def lookup(lpf, domain: str, name: str, timeout: float = NAMING_TIMEOUT):
    """Task helper returning (host, port) or None when the name is not registered."""
    ans = yield from naming_call(lpf, domain, "NsLookup", {"name": name}, timeout)
    if ans.verb == "NsLocation":
        host, port = ans.body["location"]
        return (host, int(port))
    if ans.body.get("error") == "NotFound":
        return None
    raise NamingUnavailable(f"lookup of {name}@{domain}: {ans.body.get('error')} {ans.body.get('text', '')}")


def register(lpf, domain: str, name: str, timeout: float = NAMING_TIMEOUT):
    if lpf.location is None:
        raise NamingUnavailable(f"{lpf.name} has no network location to register {name}")
    ans = yield from naming_call(lpf, domain, "NsRegister",
                                 {"name": name, "location": list(lpf.location)}, timeout)
    if ans.verb != "NsRegistered":
        raise NamingUnavailable(f"register of {name}@{domain}: {ans.body.get('error')} {ans.body.get('text', '')}")
    return ans.body


def unregister(lpf, domain: str, name: str, location=None, timeout: float = NAMING_TIMEOUT,
               config: dict | None = None):
    body = {"name": name}
    if location is not None:
        body["location"] = list(location)
    ans = yield from naming_call(lpf, domain, "NsUnregister", body, timeout, config=config)
    if ans.verb != "NsUnregistered":
        raise NamingUnavailable(f"unregister of {name}@{domain}: {ans.body.get('error')} {ans.body.get('text', '')}")
    return ans.body


def activate(lpf, name: str, config: dict, scope: str, impl=None, domains=(), remote_only=False):
    """Task body behind ``LpfContext.activate_module``."""
    if scope == LOCAL:
        return lpf.load(name, impl, config)
    if scope != GLOBAL:
        raise ValueError(f"scope must be LOCAL or GLOBAL, not {scope!r}")
    if not remote_only and impl is not None and not isinstance(impl, type):
        from . import registry
        if not registry.known(impl):
            raise UnknownModule(f"no module implementation registered as {impl!r}")
    domains = list(domains) or [config.get("domain", "default")]
    timeout = float(lpf.config.get("naming_timeout_s", NAMING_TIMEOUT))
    try:
        where = yield from lookup(lpf, domains[0], name, timeout)
    except NamingUnavailable as exc:
        lpf.alarm("ERROR", f"GLOBAL activation of {name} failed: {exc}", module="ModuleActivator")
        raise
    if name in lpf.modules:
        # Another task finished the same activation while we waited.
        return lpf.modules[name]
    if where is not None and where != lpf.location:
        from ..net.proxy import Proxy
        proxy_cfg = {"service": name, "domain": domains[0], "host": where[0], "port": where[1]}
        lpf.register_module(_spec(name, proxy_cfg), factory=Proxy)
        return lpf.modules[name]
    if remote_only:
        raise NamingUnavailable(f"service {name} is not registered in domain {domains[0]}")
    module = lpf.load(name, impl, config)
    try:
        for domain in domains:
            yield from register(lpf, domain, name, timeout)
    except NamingUnavailable as exc:
        lpf.alarm("ERROR", f"registration of {name} failed: {exc}", module="ModuleActivator")
        lpf.unload_module(name, reason="registration failed")
        raise
    lpf.global_services[name] = list(domains)
    return module


def _spec(name, config):
    from .core import PASSIVE, ModuleSpec
    return ModuleSpec(name, PASSIVE, config, impl="Proxy")
