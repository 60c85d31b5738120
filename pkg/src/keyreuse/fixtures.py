"""Synthetic corpora for pipeline regression and demos.

:func:`headline_corpus` builds snapshots in which 83 keys are each reused
across several service nodes, 485 in total, buried among ordinary
single-service nodes, NAT-shared addresses and unidentifiable endpoints.
:func:`profile_corpus` builds one reusing operator with enrichment rows
that place every address in a single city and provider.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .crawler import Observation, Snapshot
from .handshaker import RemoteService, ServiceIdentity, load_catalog
from .identity import NodeRecord, PublicKey, generate_keypair

# services per reusing user
HEADLINE_SERVICES = (
    [41, 39, 29, 20, 18, 15, 14, 12, 10, 9, 8, 7, 6, 6]
    + [2] * 8 + [3] * 25 + [4] * 20 + [5] * 16
)
# ips per user, aligned with HEADLINE_SERVICES; unlisted users have one ip
HEADLINE_IPS = {
    0: 12, 1: 12, 2: 10, 3: 9, 4: 8, 5: 7, 6: 6, 7: 5, 8: 4, 9: 3, 10: 3, 11: 2, 12: 2, 13: 2,
    14: 2, 15: 2, 16: 2, 17: 2, 22: 2, 23: 2, 24: 2,
}
AGENTS = ("Lighthouse", "Teku", "Prysm", "Nimbus")


@dataclass
class FixtureNetwork:
    """Service endpoints keyed by ``(ip, tcp_port)``."""

    services: dict = field(default_factory=dict)

    def add(self, record: NodeRecord, identity: ServiceIdentity | None, reachable: bool = True,
            expose_agent: bool = True) -> None:
        self.services[record.tcp_endpoint] = RemoteService(record, identity, reachable=reachable,
                                                           expose_agent=expose_agent)

    def service_at(self, ip: str, tcp_port: int) -> RemoteService | None:
        return self.services.get((ip, tcp_port))


@dataclass
class Corpus:
    snapshots: list[Snapshot]
    network: FixtureNetwork
    enrichment: list[dict] = field(default_factory=list)
    # public keys of the operators planted as reusers
    planted: list[PublicKey] = field(default_factory=list)

    @property
    def observations(self) -> list[Observation]:
        return [o for s in self.snapshots for o in s.observations]


class _Builder:
    def __init__(self, seed: int, n_snapshots: int):
        self.rng = random.Random(f"fixture/{seed}")
        self.seed = seed
        self.keys = 0
        self.snapshots = [Snapshot(f"snap-{i:03d}", i * 1_800_000, i * 1_800_000 + 600_000)
                          for i in range(n_snapshots)]
        self.network = FixtureNetwork()

    def key(self) -> PublicKey:
        self.keys += 1
        return generate_keypair(self.seed, 10_000 + self.keys).public_key

    def node(self, pk: PublicKey, ip: str, port: int, identity, protocol: str = "v4",
             reachable: bool = True, expose_agent: bool = True, sightings: int | None = None) -> None:
        rec = NodeRecord(pk, ip, port, port)
        self.network.add(rec, identity, reachable, expose_agent)
        n = sightings or self.rng.randint(1, len(self.snapshots))
        for snap in self.rng.sample(self.snapshots, n):
            snap.observations.append(Observation.of(rec, snap.snapshot_id, protocol, snap.started_at))

    def finish(self) -> list[Snapshot]:
        for snap in self.snapshots:
            self.rng.shuffle(snap.observations)
        return self.snapshots


def _ip(a: int, i: int) -> str:
    return f"{a}.{(i >> 8) & 255}.{i & 255}.{1 + (i >> 16)}"


def headline_corpus(seed: int = 0, n_snapshots: int = 6) -> Corpus:
    b = _Builder(seed, n_snapshots)
    catalog = load_catalog()
    # mainnet-heavy weights, so one label carries the census
    weights = [40, 8, 6, 12, 14, 6, 8, 6]
    planted = []
    ip_counter = 0
    for u, n_services in enumerate(HEADLINE_SERVICES):
        pk = b.key()
        planted.append(pk)
        n_ips = HEADLINE_IPS.get(u, 1)
        ips = [_ip(100, ip_counter + j) for j in range(n_ips)]
        ip_counter += n_ips
        for s in range(n_services):
            ip = ips[s % n_ips]
            port = 30303 + s // n_ips
            ident = b.rng.choices(catalog, weights)[0]
            b.node(pk, ip, port, ident)
    # ordinary nodes: one key, one service
    for i in range(300):
        b.node(b.key(), _ip(120, i), 30303, b.rng.choices(catalog, weights)[0])
    # consensus-layer nodes, some hiding their agent
    for i in range(60):
        b.node(b.key(), _ip(130, i), 9000, ServiceIdentity("consensus", agent=b.rng.choice(AGENTS)),
               protocol="v5", expose_agent=i % 3 != 0)
    # NAT: several keys behind one address, one service each
    for i in range(10):
        for j in range(3):
            b.node(b.key(), _ip(140, i), 30303 + j, b.rng.choices(catalog, weights)[0])
    # endpoints that never complete a handshake
    for i in range(40):
        b.node(b.key(), _ip(150, i), 30303, None, reachable=i % 2 == 0)
    # one key on two endpoints with only one identifiable service: not a reuse witness
    for i in range(10):
        pk = b.key()
        b.node(pk, _ip(160, 2 * i), 30303, catalog[0])
        b.node(pk, _ip(160, 2 * i + 1), 30303, None, reachable=False)
    return Corpus(b.finish(), b.network, planted=planted)


def profile_corpus(seed: int = 0) -> Corpus:
    """One operator, one key, three addresses and five services in one city."""
    b = _Builder(seed, 3)
    catalog = load_catalog()
    pk = b.key()
    layout = [("203.0.113.10", 30303, catalog[0]), ("203.0.113.10", 30304, catalog[3]),
              ("203.0.113.11", 30303, catalog[4]), ("203.0.113.12", 30303, catalog[5]),
              ("203.0.113.12", 30304, catalog[6])]
    for ip, port, ident in layout:
        b.node(pk, ip, port, ident, sightings=2)
    # bystanders elsewhere
    b.node(b.key(), "198.51.100.7", 30303, catalog[0], sightings=2)
    b.node(b.key(), "198.51.100.8", 30303, catalog[4], sightings=1)
    enrichment = [
        dict(source="geoip", ip_prefix="203.0.113.0/24", country="Country A", region="Region B",
             city="City C", isp="Company D", org="Company D", hostname=""),
        dict(source="geoip", ip_prefix="198.51.100.0/24", country="Country E", region="Region F",
             city="City G", isp="Company H", org="Company H", hostname=""),
    ]
    for i, ip in enumerate(("203.0.113.10", "203.0.113.11", "203.0.113.12")):
        enrichment.append(dict(source="rdns", ip_prefix=ip, country="", region="", city="",
                               isp="", org="", hostname=f"vps{i + 1}.company-d.example"))
    return Corpus(b.finish(), b.network, enrichment, planted=[pk])
