"""Discovery: ask each host's BareLPF what it runs, then ask each LPF how it is."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..lpf.errors import RemoteUnreachable
from ..lpf.message import Address
from ..net.client import Client, ClientTimeout


@dataclass
class HostResult:
    host: str
    reachable: bool
    error: str = ""
    lpfs: list[dict] = field(default_factory=list)  # name, port, marker, status summary
    silent: list[dict] = field(default_factory=list)  # listed by the BareLPF but not answering


@dataclass
class DiscoveryResult:
    hosts: list[HostResult] = field(default_factory=list)

    @property
    def entries(self) -> list[dict]:
        return [dict(e, host=h.host) for h in self.hosts for e in h.lpfs]

    @property
    def unreachable(self) -> list[str]:
        return [h.host for h in self.hosts if not h.reachable]


def discover(hosts, bare_port: int, timeout_s: float = 2.0, client: Client | None = None) -> DiscoveryResult:
    """Partial results are the contract: dead hosts are reported, never raised."""
    own = client is None
    client = client or Client("farmctl-discover")
    result = DiscoveryResult()
    try:
        for host in hosts:
            hr = HostResult(host, True)
            result.hosts.append(hr)
            try:
                ans = client.request(Address("LocalLpfMap", host=host, port=bare_port), "ListLocalLpfs",
                                     timeout=timeout_s)
            except (RemoteUnreachable, ClientTimeout) as exc:
                hr.reachable, hr.error = False, str(exc)
                continue
            for child in ans.body.get("lpfs", []):
                if not child.get("alive", True):
                    continue
                try:
                    st = client.request(Address("Lpf", host=host, port=child["port"]), "LpfStatus",
                                        timeout=timeout_s).body
                except (RemoteUnreachable, ClientTimeout) as exc:
                    hr.silent.append(dict(child, error=str(exc)))
                    continue
                hr.lpfs.append({"name": st.get("name", child.get("name")), "port": child["port"],
                                "marker": st.get("marker") or child.get("marker", ""), "pid": st.get("pid"),
                                "modules": st.get("modules", []), "queue_depth": st.get("queue_depth"),
                                "degraded": st.get("degraded"), "uptime": st.get("uptime")})
    finally:
        if own:
            client.close()
    return result
