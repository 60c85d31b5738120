"""Graph-based identity association.

Observations and handshake results become an undirected attribute graph:
each sighting links a public key to an ``ip:port`` endpoint and that
endpoint to its ip. A successful handshake hangs a service vertex off the
endpoint; the service vertex is scoped to that endpoint, so it stands for
one service node. Enrichment providers attach geo, provider and hostname
vertices to ip vertices, again scoped to the ip they describe. Weakly
connected components of the result are the candidate users.
"""
from __future__ import annotations

import hashlib
import ipaddress
import re
import socket
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .graphs import components
from .handshaker import HandshakeRecord, Outcome, ServiceIdentity

PUBKEY = "pubkey"
ENDPOINT = "endpoint"
IP = "ip"
SERVICE = "service"
COUNTRY = "country"
REGION = "region"
CITY = "city"
ISP = "isp"
ORG = "org"
HOSTNAME = "hostname"
NETWORK_ID = "network_id"
KINDS = (PUBKEY, ENDPOINT, IP, SERVICE, COUNTRY, REGION, CITY, ISP, ORG, HOSTNAME, NETWORK_ID)

REUSE_THRESHOLD = 2


def canonical(value: str) -> str:
    return " ".join(str(value).split()).lower()


@dataclass(frozen=True, order=True)
class AttributeVertex:
    kind: str
    value: str
    # vertex the attribute describes; empty for identity-level vertices
    scope: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown vertex kind {self.kind!r}")
        object.__setattr__(self, "value", canonical(self.value))
        object.__setattr__(self, "scope", canonical(self.scope))

    def __str__(self) -> str:
        return f"{self.kind}:{self.value}" + (f"@{self.scope}" if self.scope else "")


@dataclass(frozen=True, order=True)
class Provenance:
    source: str  # observation | handshake | provider
    ref: str


class IdentityGraph:
    def __init__(self) -> None:
        self.vertices: set[AttributeVertex] = set()
        self.edges: dict[frozenset, set[Provenance]] = {}
        self.errors: dict[tuple[str, str], str] = {}
        self._adj: dict[AttributeVertex, set[AttributeVertex]] = defaultdict(set)

    def add_vertex(self, v: AttributeVertex) -> None:
        self.vertices.add(v)

    def add_edge(self, a: AttributeVertex, b: AttributeVertex, prov: Provenance) -> None:
        if a == b:
            return
        self.vertices.update((a, b))
        self.edges.setdefault(frozenset((a, b)), set()).add(prov)
        self._adj[a].add(b)
        self._adj[b].add(a)

    def neighbors(self, v: AttributeVertex, kind: str | None = None) -> set[AttributeVertex]:
        return {w for w in self._adj.get(v, ()) if kind is None or w.kind == kind}

    def edge_set(self) -> set[frozenset]:
        return set(self.edges)

    def __eq__(self, other) -> bool:
        if not isinstance(other, IdentityGraph):
            return NotImplemented
        return self.vertices == other.vertices and self.edges == other.edges

    def __len__(self) -> int:
        return len(self.vertices)


class EnrichmentProvider(Protocol):
    name: str

    def query(self, attribute: AttributeVertex) -> list[AttributeVertex]: ...


@dataclass
class GeoIpFixture:
    """Longest-prefix lookup over ``(ip_prefix, country, region, city, isp, org)`` rows."""

    rows: Sequence[tuple[str, str, str, str, str, str]]
    name: str = "geoip"

    def __post_init__(self) -> None:
        nets = [(ipaddress.IPv4Network(r[0], strict=False), r[1:]) for r in self.rows]
        self._nets = sorted(nets, key=lambda n: -n[0].prefixlen)

    def query(self, attribute: AttributeVertex) -> list[AttributeVertex]:
        if attribute.kind != IP:
            return []
        addr = ipaddress.IPv4Address(attribute.value)
        for net, (country, region, city, isp, org) in self._nets:
            if addr in net:
                pairs = ((COUNTRY, country), (REGION, region), (CITY, city), (ISP, isp), (ORG, org))
                return [AttributeVertex(k, v) for k, v in pairs if v]
        return []


@dataclass
class ReverseLookupFixture:
    rows: Sequence[tuple[str, str]]
    name: str = "rdns"

    def __post_init__(self) -> None:
        self._names = {str(ipaddress.IPv4Address(ip)): host for ip, host in self.rows}

    def query(self, attribute: AttributeVertex) -> list[AttributeVertex]:
        host = self._names.get(attribute.value) if attribute.kind == IP else None
        return [AttributeVertex(HOSTNAME, host)] if host else []


class LiveReverseLookup:
    """Reverse DNS through the system resolver. Off unless explicitly enabled."""

    name = "rdns-live"

    def __init__(self, enabled: bool = False):
        self.enabled = enabled

    def query(self, attribute: AttributeVertex) -> list[AttributeVertex]:
        if not self.enabled or attribute.kind != IP:
            return []
        try:
            host = socket.gethostbyaddr(attribute.value)[0]
        except OSError:
            return []
        return [AttributeVertex(HOSTNAME, host)]


def providers_from_rows(rows: Iterable[Mapping]) -> list[EnrichmentProvider]:
    """Split stored enrichment rows into a geo provider and a reverse-lookup provider."""
    geo, rdns = [], []
    for row in rows:
        if row["source"] == "geoip":
            geo.append((row["ip_prefix"], row["country"], row["region"], row["city"], row["isp"], row["org"]))
        elif row["source"] == "rdns":
            rdns.append((row["ip_prefix"], row["hostname"]))
        else:
            raise ValueError(f"unknown enrichment source {row['source']!r}")
    return [GeoIpFixture(geo), ReverseLookupFixture(rdns)]


def services_from_handshakes(records: Iterable[HandshakeRecord]) -> dict:
    out = {}
    for rec in records:
        if rec.outcome is Outcome.IDENTIFIED:
            out[rec.dedup_key] = rec.identity
    return out


def endpoint_value(ip: str, port: int) -> str:
    return f"{ip}:{port}"


def build_graph(node_list: Iterable, node_service_dict: Mapping[tuple, ServiceIdentity],
                outer_sources_list: Sequence[EnrichmentProvider] = ()) -> IdentityGraph:
    graph = IdentityGraph()
    for node in node_list:
        seen = Provenance("observation", node.snapshot_id)
        pk = AttributeVertex(PUBKEY, node.public_key.hex())
        ep = AttributeVertex(ENDPOINT, endpoint_value(node.ip, node.tcp_port))
        ip = AttributeVertex(IP, node.ip)
        graph.add_edge(pk, ep, seen)
        graph.add_edge(ep, ip, seen)
        service = node_service_dict.get((node.public_key, node.ip, node.tcp_port))
        if service is None:
            continue
        svc = AttributeVertex(SERVICE, service.key, scope=ep.value)
        graph.add_edge(ep, svc, Provenance("handshake", node.snapshot_id))
    return enrich(graph, outer_sources_list)


def enrich(graph: IdentityGraph, providers: Sequence[EnrichmentProvider]) -> IdentityGraph:
    """Attach provider results to every ip vertex, in place. Safe to repeat."""
    ips = sorted(v for v in graph.vertices if v.kind == IP)
    for provider in sorted(providers, key=lambda p: p.name):
        prov = Provenance("provider", provider.name)
        for v in ips:
            try:
                found = provider.query(v)
            except Exception as exc:  # a broken source must not stop the others
                graph.errors[(provider.name, v.value)] = f"{type(exc).__name__}: {exc}"
                continue
            for attr in found:
                graph.add_edge(v, replace(attr, scope=v.value), prov)
    return graph


def weakly_connected_components(graph: IdentityGraph) -> list[set[AttributeVertex]]:
    return components(sorted(graph.vertices), (tuple(sorted(e)) for e in graph.edges))


@dataclass
class UserProfile:
    user_id: str
    pubkeys: set[str]
    ips: set[str]
    endpoints: set[str]
    service_nodes: set[tuple[str, str]]  # (endpoint, service key)
    geo: set[tuple[str, str, str]] = field(default_factory=set)
    providers: set[tuple[str, str]] = field(default_factory=set)
    hostnames: set[str] = field(default_factory=set)
    evidence: list[tuple[str, str, str, str]] = field(default_factory=list)

    @property
    def services(self) -> set[str]:
        return {svc for _, svc in self.service_nodes}


def _service_nodes_of(graph: IdentityGraph, pk: AttributeVertex) -> set[AttributeVertex]:
    out = set()
    for ep in graph.neighbors(pk, ENDPOINT):
        out |= graph.neighbors(ep, SERVICE)
    return out


def _profile(graph: IdentityGraph, comp: set[AttributeVertex]) -> UserProfile:
    by_kind = defaultdict(set)
    for v in comp:
        by_kind[v.kind].add(v)
    prof = UserProfile(
        user_id="",
        pubkeys={v.value for v in by_kind[PUBKEY]},
        ips={v.value for v in by_kind[IP]},
        endpoints={v.value for v in by_kind[ENDPOINT]},
        service_nodes={(v.scope, v.value) for v in by_kind[SERVICE]},
        hostnames={v.value for v in by_kind[HOSTNAME]},
    )
    for ip in by_kind[IP]:
        attrs = defaultdict(str)
        for w in graph.neighbors(ip):
            attrs[w.kind] = w.value
        if attrs[COUNTRY] or attrs[REGION] or attrs[CITY]:
            prof.geo.add((attrs[COUNTRY], attrs[REGION], attrs[CITY]))
        if attrs[ISP] or attrs[ORG]:
            prof.providers.add((attrs[ISP], attrs[ORG]))
    evidence = []
    for edge, provs in graph.edges.items():
        a, b = sorted(edge)
        if a in comp:
            for p in provs:
                evidence.append((str(a), str(b), p.source, p.ref))
    prof.evidence = sorted(evidence)
    return prof


def _natural(user_id: str) -> tuple:
    return tuple(int(t) if t.isdigit() else t for t in re.split(r"(\d+)", user_id))


def detect_reuse(graph: IdentityGraph, threshold: int = REUSE_THRESHOLD) -> list[UserProfile]:
    """Profiles of components where one key fronts ``threshold`` or more service nodes."""
    flagged = []
    for comp in weakly_connected_components(graph):
        pks = [v for v in comp if v.kind == PUBKEY]
        if any(len(_service_nodes_of(graph, pk)) >= threshold for pk in pks):
            flagged.append(_profile(graph, comp))
    flagged.sort(key=lambda p: hashlib.sha256("\n".join(sorted(p.pubkeys)).encode()).hexdigest())
    for i, prof in enumerate(flagged, 1):
        prof.user_id = f"User{i}"
    return flagged


@dataclass(frozen=True)
class UserRow:
    user_id: str
    pubkeys: int
    ips: int
    services: int


@dataclass
class UserStats:
    services_histogram: dict[int, int]
    ip_histogram: dict[int, int]
    per_user_rows: list[UserRow]

    @property
    def users(self) -> int:
        return len(self.per_user_rows)

    @property
    def service_nodes(self) -> int:
        return sum(r.services for r in self.per_user_rows)

    def share_with_services(self, lo: int, hi: int) -> float:
        if not self.per_user_rows:
            return 0.0
        return sum(1 for r in self.per_user_rows if lo <= r.services <= hi) / self.users


def user_stats(profiles: Iterable[UserProfile]) -> UserStats:
    rows = sorted((UserRow(p.user_id, len(p.pubkeys), len(p.ips), len(p.service_nodes)) for p in profiles),
                  key=lambda r: _natural(r.user_id))
    services = Counter(r.services for r in rows)
    ips = Counter(r.ips for r in rows)
    return UserStats(dict(sorted(services.items())), dict(sorted(ips.items())), rows)


def salted(value: str, salt: str) -> str:
    return hashlib.sha256(f"{salt}\x00{value}".encode()).hexdigest()[:16]


def redact(profile: UserProfile, salt: str) -> UserProfile:
    """Copy of ``profile`` with every raw value replaced by a salted hash."""
    h = lambda v: salted(v, salt)  # noqa: E731
    return UserProfile(
        user_id=profile.user_id,
        pubkeys={h(v) for v in profile.pubkeys},
        ips={h(v) for v in profile.ips},
        endpoints={h(v) for v in profile.endpoints},
        service_nodes={(h(ep), svc) for ep, svc in profile.service_nodes},
        geo={tuple(h(x) for x in g) for g in profile.geo},
        providers={tuple(h(x) for x in p) for p in profile.providers},
        hostnames={h(v) for v in profile.hostnames},
        evidence=[(h(a), h(b), src, ref) for a, b, src, ref in profile.evidence],
    )


_EXACT_LIMIT = 10**8


def collision_risk(nonce_bits: int, sessions: int, exact: bool = False) -> float:
    """Chance that ``sessions`` uniform ``nonce_bits``-bit nonces are not all distinct.

    The default is the birthday approximation 1 - exp(-k(k-1) / 2^(n+1)).
    ``exact=True`` evaluates 1 - prod(1 - i/N) for N = 2^n, summing log1p
    terms in numpy.
    """
    if nonce_bits < 1:
        raise ValueError("nonce_bits must be >= 1")
    if sessions < 0:
        raise ValueError("sessions must be >= 0")
    k = sessions
    if k < 2:
        return 0.0
    if not exact:
        return float(-np.expm1(-(k * (k - 1)) / 2 ** (nonce_bits + 1)))
    space = 2 ** nonce_bits
    if k > space:
        return 1.0
    if k > _EXACT_LIMIT:
        raise ValueError(f"exact evaluation limited to {_EXACT_LIMIT} sessions")
    inv = 2.0 ** -nonce_bits if nonce_bits < 1075 else 0.0
    log_distinct = 0.0
    for start in range(1, k, 1 << 20):
        i = np.arange(start, min(k, start + (1 << 20)), dtype=np.float64)
        log_distinct += float(np.sum(np.log1p(-i * inv)))
    return float(-np.expm1(log_distinct))
