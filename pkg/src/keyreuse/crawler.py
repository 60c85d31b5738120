"""Snapshot crawling over a discovery network, plus the analytic coverage estimate.

A crawl walks the network breadth first from its bootstrap records. v4
crawls send a fixed number of FindNode queries with uniformly random
targets to every live node; v5 crawls ask each node once per distance.
Queries go out in waves of at most :data:`MAX_IN_FLIGHT` nodes, and each
node's targets come from a generator seeded by ``(seed, public_key)``, so
the snapshot does not depend on how a wave is scheduled.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .dht import BUCKET_COUNT, BUCKET_SIZE, TABLE_CAPACITY
from .identity import NodeId, NodeRecord, PublicKey

MAX_IN_FLIGHT = 64
WAVE_TICKS = 100
SNAPSHOT_INTERVAL = 30 * 60 * 1000


class CrawlError(RuntimeError):
    pass


class DiscoveryNetwork(Protocol):
    def bootstrap(self) -> list[NodeRecord]: ...
    def find_node_v4(self, record: NodeRecord, target: NodeId) -> list[NodeRecord] | None: ...
    def find_node_v5(self, record: NodeRecord, distance: int) -> list[NodeRecord] | None: ...


@dataclass(frozen=True)
class Observation:
    snapshot_id: str
    public_key: PublicKey
    ip: str
    udp_port: int
    tcp_port: int
    protocol: str
    seen_at: int

    @classmethod
    def of(cls, record: NodeRecord, snapshot_id: str, protocol: str, seen_at: int) -> "Observation":
        return cls(snapshot_id, record.public_key, record.ip, record.udp_port, record.tcp_port,
                   protocol, seen_at)

    @property
    def record(self) -> NodeRecord:
        return NodeRecord(self.public_key, self.ip, self.udp_port, self.tcp_port)

    @property
    def dedup_key(self) -> tuple[PublicKey, str, int]:
        return (self.public_key, self.ip, self.tcp_port)


@dataclass
class Snapshot:
    snapshot_id: str
    started_at: int
    ended_at: int
    observations: list[Observation] = field(default_factory=list)
    # endpoint -> records that node returned; kept in memory only
    neighbor_sets: dict = field(default_factory=dict, repr=False, compare=False)
    queries_sent: dict = field(default_factory=dict, repr=False, compare=False)


def expected_distinct(n_queries: int) -> float:
    """Expected distinct table entries after ``n_queries`` random 16-record replies."""
    if n_queries < 0:
        raise ValueError("n_queries must be >= 0")
    return TABLE_CAPACITY * (1 - ((TABLE_CAPACITY - BUCKET_SIZE) / TABLE_CAPACITY) ** n_queries)


def expected_fraction(n_queries: int) -> float:
    return expected_distinct(n_queries) / TABLE_CAPACITY


def _key(record: NodeRecord) -> tuple:
    return (record.public_key, record.ip, record.udp_port)


def _crawl(network: DiscoveryNetwork, protocol: str, ask, snapshot_id: str, started_at: int) -> Snapshot:
    boot = network.bootstrap()
    if not boot:
        raise CrawlError("crawl needs at least one bootstrap record")
    snap = Snapshot(snapshot_id, started_at, started_at)
    seen: dict[tuple, NodeRecord] = {}

    def observe(record: NodeRecord, at: int) -> bool:
        k = (record.public_key, record.ip, record.udp_port, record.tcp_port)
        if k in seen:
            return False
        seen[k] = record
        snap.observations.append(Observation.of(record, snapshot_id, protocol, at))
        return True

    frontier: list[NodeRecord] = []
    for rec in boot:
        if observe(rec, started_at):
            frontier.append(rec)
    now = started_at
    while frontier:
        wave, frontier = frontier[:MAX_IN_FLIGHT], frontier[MAX_IN_FLIGHT:]
        now += WAVE_TICKS
        for rec in wave:
            replies, sent = ask(rec)
            snap.queries_sent[_key(rec)] = sent
            if replies is None:
                continue
            got = snap.neighbor_sets.setdefault(_key(rec), set())
            for r in replies:
                got.add(r)
                if observe(r, now):
                    frontier.append(r)
    snap.ended_at = now
    return snap


def crawl_v4(network: DiscoveryNetwork, queries_per_node: int = 40, seed: int = 0,
             snapshot_id: str | None = None, started_at: int = 0) -> Snapshot:
    if queries_per_node < 0:
        raise ValueError("queries_per_node must be >= 0")

    def ask(rec: NodeRecord):
        rng = random.Random(f"crawl/{seed}/{rec.public_key.hex()}/{rec.ip}/{rec.udp_port}")
        replies: list[NodeRecord] = []
        for sent in range(queries_per_node):
            got = network.find_node_v4(rec, NodeId.from_int(rng.getrandbits(256)))
            if got is None:
                return None, sent + 1
            replies += got
        return replies, queries_per_node

    sid = snapshot_id or f"v4-s{seed}-t{started_at}"
    return _crawl(network, "v4", ask, sid, started_at)


def crawl_v5(network: DiscoveryNetwork, seed: int = 0, snapshot_id: str | None = None,
             started_at: int = 0) -> Snapshot:
    # distances are exhaustive, so the seed only names the snapshot
    def ask(rec: NodeRecord):
        replies: list[NodeRecord] = []
        for d in range(BUCKET_COUNT):
            got = network.find_node_v5(rec, d)
            if got is None:
                return None, d + 1
            replies += got
        return replies, BUCKET_COUNT

    sid = snapshot_id or f"v5-s{seed}-t{started_at}"
    return _crawl(network, "v5", ask, sid, started_at)


def recovered_fractions(snapshot: Snapshot, truth: dict) -> list[float]:
    """Per-node share of the true table that the crawl got back.

    ``truth`` maps an endpoint key ``(public_key, ip, udp_port)`` to the
    records actually held; nodes with empty tables are skipped.
    """
    out = []
    for key, held in truth.items():
        held = set(held)
        if not held or key not in snapshot.neighbor_sets:
            continue
        out.append(len(held & snapshot.neighbor_sets[key]) / len(held))
    return out


@dataclass(frozen=True)
class Summary:
    distinct_by_key: int
    distinct_by_ip: int
    total_with_duplicates: int


def summarize(snapshots: Iterable[Snapshot]) -> Summary:
    keys, ips, total = set(), set(), 0
    for snap in snapshots:
        for obs in snap.observations:
            keys.add(obs.public_key)
            ips.add(obs.ip)
            total += 1
    return Summary(len(keys), len(ips), total)


def snapshot_from_observations(observations: Sequence[Observation]) -> list[Snapshot]:
    """Regroup stored observations into snapshots, in first-seen order."""
    groups: dict[str, Snapshot] = {}
    for obs in observations:
        snap = groups.get(obs.snapshot_id)
        if snap is None:
            snap = groups[obs.snapshot_id] = Snapshot(obs.snapshot_id, obs.seen_at, obs.seen_at)
        snap.observations.append(obs)
        snap.started_at = min(snap.started_at, obs.seen_at)
        snap.ended_at = max(snap.ended_at, obs.seen_at)
    return list(groups.values())
