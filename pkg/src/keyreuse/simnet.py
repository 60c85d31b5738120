"""Deterministic in-process network of discovery nodes with service connections.

Everything runs on one logical clock (1 tick = 1 ms) driven by a single
event heap ordered by ``(time, sequence)``. Messages travel between UDP
endpoints, never between public keys, so several nodes may share a key.

Dialling draws candidates from what the DHT yields: bootnodes, table
inserts and lookup results. ``standard`` dialers stop at the outbound
limit; ``eager`` dialers keep probing fresh candidates and, when a new
compatible peer accepts, let go of their most recently opened outbound link.
"""
from __future__ import annotations

import enum
import heapq
import itertools
import random
import zlib
from dataclasses import dataclass, field
from typing import Sequence

from .dht import InsertOutcome, PersistenceTables, RoutingTable
from .discovery import (
    MINUTE,
    SECOND,
    DiscoveryNode,
    Message,
    Timer,
    neighbors_v4,
    nodes_v5,
)
from .graphs import components
from .handshaker import (
    MAX_INBOUND,
    MAX_OUTBOUND,
    MAX_PEERS,
    RemoteService,
    ServiceIdentity,
    check_limits,
    load_catalog,
    same_service,
)
from .identity import KeyPair, NodeId, NodeRecord, PublicKey, generate_keypair


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SharedKey:
    """Marker: every node spec carrying the same label runs under one key pair."""

    label: str = "KEY"


@dataclass
class NodeSpec:
    ip: str
    service: ServiceIdentity | None = None
    key: KeyPair | SharedKey | None = None
    udp_port: int = 30303
    tcp_port: int = 30303
    start_time: int = 0
    bootnodes: tuple[int, ...] = ()
    dialer: str = "standard"
    reachable: bool = True
    expose_agent: bool = True


@dataclass
class SimConfig:
    seed: int
    node_specs: list[NodeSpec]
    protocol: str = "v4"
    latency: int | tuple[int, int] = 50
    max_peers: int = MAX_PEERS
    max_outbound: int = MAX_OUTBOUND
    max_inbound: int = MAX_INBOUND
    duration: int = 30 * MINUTE
    refresh_interval: int = 3 * MINUTE
    log_messages: bool = False

    def validate(self) -> None:
        if self.protocol not in ("v4", "v5"):
            raise SimConfigError(f"unknown protocol {self.protocol!r}")
        if self.max_inbound + self.max_outbound != self.max_peers:
            raise SimConfigError("max_inbound + max_outbound must equal max_peers")
        if min(self.max_inbound, self.max_outbound) < 0:
            raise SimConfigError("connection limits must be non-negative")
        if self.duration < 0 or self.refresh_interval <= 0:
            raise SimConfigError("duration must be >= 0 and refresh_interval > 0")
        lo, hi = (self.latency, self.latency) if isinstance(self.latency, int) else self.latency
        if not 0 < lo <= hi:
            raise SimConfigError(f"bad latency {self.latency!r}")
        udp, tcp = set(), set()
        for i, spec in enumerate(self.node_specs):
            if spec.dialer not in ("standard", "eager", "none"):
                raise SimConfigError(f"node {i}: unknown dialer {spec.dialer!r}")
            if (spec.ip, spec.udp_port) in udp or (spec.ip, spec.tcp_port) in tcp:
                raise SimConfigError(f"node {i}: endpoint {spec.ip} already in use")
            udp.add((spec.ip, spec.udp_port))
            tcp.add((spec.ip, spec.tcp_port))
            if spec.start_time < 0:
                raise SimConfigError(f"node {i}: negative start time")
            for b in spec.bootnodes:
                if not 0 <= b < len(self.node_specs):
                    raise SimConfigError(f"node {i}: bootnode index {b} out of range")


class ConnectOutcome(str, enum.Enum):
    CONNECTED = "connected"
    REFUSED_LIMIT = "refused_limit"
    REFUSED_TUPLE = "refused_tuple"
    UNREACHABLE = "unreachable"


@dataclass(frozen=True)
class PeerConnection:
    a: PublicKey
    b: PublicKey
    a_index: int  # initiator
    b_index: int
    established_at: int

    def direction(self, index: int) -> str:
        if index == self.a_index:
            return "outbound"
        if index == self.b_index:
            return "inbound"
        raise ValueError(f"node {index} is not part of this connection")


@dataclass
class NodeState:
    """Final view of one simulated node; the unit a sim_result file stores."""

    index: int
    record: NodeRecord
    protocol: str
    service: ServiceIdentity | None
    started: bool
    inbound: int
    outbound: int
    table: tuple[NodeRecord, ...] = ()
    reachable: bool = True
    expose_agent: bool = True
    max_inbound: int = MAX_INBOUND
    max_outbound: int = MAX_OUTBOUND


@dataclass
class DhtGraph:
    """Directed graph with an edge a -> b when b's record sits in a's table."""

    size: int
    edges: list[tuple[int, int]]

    @classmethod
    def from_states(cls, states: list[NodeState]) -> "DhtGraph":
        by_udp = {(s.record.ip, s.record.udp_port): s.index for s in states}
        edges = []
        for s in states:
            for rec in s.table:
                b = by_udp.get(rec.udp_endpoint)
                if b is not None and states[b].record.public_key == rec.public_key:
                    edges.append((s.index, b))
        return cls(len(states), edges)

    def components(self) -> list[set[int]]:
        return components(range(self.size), self.edges)


@dataclass
class SimResult:
    nodes: list[NodeState]
    connections: list[PeerConnection]
    graph: DhtGraph
    event_log: list[str] = field(default_factory=list)
    tables: list[RoutingTable | None] = field(default_factory=list, repr=False)

    def counts(self, index: int) -> tuple[int, int]:
        n = self.nodes[index]
        return (n.inbound, n.outbound)

    def log_text(self) -> str:
        return "\n".join(self.event_log) + "\n"


@dataclass
class _Node:
    index: int
    spec: NodeSpec
    keypair: KeyPair
    record: NodeRecord
    disc: DiscoveryNode | None = None
    inbound: int = 0
    outbound: int = 0
    out_links: list[PeerConnection] = field(default_factory=list)
    queue: list[NodeRecord] = field(default_factory=list)
    known: set = field(default_factory=set)
    cursor: int = 0

    @property
    def started(self) -> bool:
        return self.disc is not None


class Network:
    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.now = 0
        self.rng = random.Random(f"simnet/{config.seed}")
        self._heap: list = []
        self._seq = itertools.count()
        self.event_log: list[str] = []
        self.links: dict[frozenset, PeerConnection] = {}
        self.nodes: list[_Node] = []
        shared: dict[str, KeyPair] = {}
        for i, spec in enumerate(config.node_specs):
            if isinstance(spec.key, KeyPair):
                kp = spec.key
            elif isinstance(spec.key, SharedKey):
                if spec.key.label not in shared:
                    shared[spec.key.label] = generate_keypair(
                        config.seed, (1 << 32) + zlib.crc32(spec.key.label.encode()))
                kp = shared[spec.key.label]
            else:
                kp = generate_keypair(config.seed, i)
            rec = NodeRecord(kp.public_key, spec.ip, spec.udp_port, spec.tcp_port)
            self.nodes.append(_Node(i, spec, kp, rec))
        self.by_udp = {n.record.udp_endpoint: n.index for n in self.nodes}
        self.by_tcp = {n.record.tcp_endpoint: n.index for n in self.nodes}
        for n in self.nodes:
            self._push(n.spec.start_time, "start", n.index, None)

    # -- event plumbing -----------------------------------------------------

    def _push(self, when: int, kind: str, index: int, payload) -> None:
        heapq.heappush(self._heap, (when, next(self._seq), kind, index, payload))

    def _log(self, index: int, event: str, detail: str = "") -> None:
        self.event_log.append(f"{self.now}\t{len(self.event_log)}\t{index}\t{event}\t{detail}")

    def _latency(self) -> int:
        lat = self.config.latency
        return lat if isinstance(lat, int) else self.rng.randint(*lat)

    def _emit(self, index: int, outputs) -> None:
        for o in outputs:
            if isinstance(o, Timer):
                self._push(self.now + o.delay, "timer", index, o.token)
            else:
                self._push(self.now + self._latency(), "deliver", index, o)

    def run_until(self, until: int) -> None:
        """Process every event strictly before ``until``."""
        while self._heap and self._heap[0][0] < until:
            when, _, kind, index, payload = heapq.heappop(self._heap)
            self.now = when
            getattr(self, f"_on_{kind}")(index, payload)
        self.now = max(self.now, until)

    def run(self) -> SimResult:
        self.run_until(self.config.duration)
        return self.result()

    # -- event handlers -----------------------------------------------------

    def _on_start(self, index: int, _payload) -> None:
        node = self.nodes[index]
        cfg = self.config
        disc = DiscoveryNode(node.record, cfg.protocol, stale_after=cfg.refresh_interval)
        node.disc = disc
        disc.on_insert = lambda rec, outcome, now, i=index: self._on_insert(i, rec, outcome)
        self._log(index, "start", node.record.ip)
        out = []
        for b in node.spec.bootnodes:
            boot = self.nodes[b].record
            if b == index:
                continue
            disc._insert(boot, self.now)
            self._add_candidate(node, boot)
            out += disc.ping(boot, self.now, purpose="bond")
        self._emit(index, out)
        self._dial(index)
        self._push(self.now + 2 * SECOND, "refresh", index, None)

    def _on_refresh(self, index: int, _payload) -> None:
        node = self.nodes[index]
        out = node.disc.refresh(self.now)
        # a random walk next to the self lookup, as real clients do; dialers also feed on its result
        target = NodeId.from_int(self.rng.getrandbits(256))
        out += node.disc.lookup(target, self.now, lambda recs, i=index: self._on_lookup(i, recs))
        self._emit(index, out)
        self._push(self.now + self.config.refresh_interval, "refresh", index, None)

    def _on_deliver(self, src: int, msg: Message) -> None:
        dst = self.by_udp.get(msg.to_addr)
        if dst is None or not self.nodes[dst].started:
            if self.config.log_messages:
                self._log(src, "undeliverable", f"{msg.kind} -> {msg.to_addr[0]}:{msg.to_addr[1]}")
            return
        if self.config.log_messages:
            self._log(dst, "recv", f"{msg.kind} from {src} id={msg.request_id}")
        self._emit(dst, self.nodes[dst].disc.handle(msg, self.now))

    def _on_timer(self, index: int, token) -> None:
        self._emit(index, self.nodes[index].disc.on_timer(token, self.now))

    def _on_insert(self, index: int, record: NodeRecord, outcome: InsertOutcome) -> None:
        if outcome is not InsertOutcome.REFRESHED:
            self._log(index, f"insert:{outcome.value}", record.public_key.hex()[:16] + f"@{record.ip}")
        if outcome is InsertOutcome.ADDED:
            node = self.nodes[index]
            self._add_candidate(node, record)
            self._dial(index)

    def _on_lookup(self, index: int, records: list[NodeRecord]) -> None:
        node = self.nodes[index]
        for rec in records:
            self._add_candidate(node, rec)
        self._dial(index)

    # -- lookups on demand --------------------------------------------------

    def lookup(self, index: int, target: NodeId, horizon: int = 10 * SECOND) -> list[NodeRecord]:
        """Run one lookup from node ``index`` to completion and return its result."""
        done: list[list[NodeRecord]] = []
        node = self.nodes[index]
        self._emit(index, node.disc.lookup(target, self.now, done.append))
        self.run_until(self.now + horizon)
        if not done:
            raise RuntimeError("lookup did not finish within the horizon")
        return done[0]

    # -- service connections ------------------------------------------------

    def _dials(self, node: _Node) -> bool:
        return node.spec.service is not None and node.spec.dialer != "none"

    def _add_candidate(self, node: _Node, record: NodeRecord) -> None:
        key = (record.public_key, record.ip, record.tcp_port)
        if key in node.known or record.public_key == node.record.public_key:
            return
        node.known.add(key)
        node.queue.append(record)

    def _dial(self, index: int) -> None:
        node = self.nodes[index]
        if not self._dials(node):
            return
        eager = node.spec.dialer == "eager"
        limit = self.config.max_outbound
        while node.cursor < len(node.queue):
            if node.outbound >= limit and not (eager and node.out_links):
                break
            record = node.queue[node.cursor]
            node.cursor += 1
            target = self.by_tcp.get(record.tcp_endpoint)
            if target is not None and frozenset((index, target)) in self.links:
                continue
            replacing = node.out_links[-1] if node.outbound >= limit else None
            self.try_connect(index, record, replacing=replacing)

    def connected(self, a: int, b: int) -> bool:
        return frozenset((a, b)) in self.links

    def try_connect(self, index: int, record: NodeRecord,
                    replacing: PeerConnection | None = None) -> ConnectOutcome:
        """Open a service connection from node ``index`` to ``record``'s tcp endpoint.

        Connection limits are checked before the tuple exchange. With
        ``replacing`` set, that outbound link is closed only if the new one
        is accepted, so the outbound cap is never exceeded.
        """
        src = self.nodes[index]
        target = self.by_tcp.get(record.tcp_endpoint)
        dst = self.nodes[target] if target is not None else None
        if (dst is None or target == index or not dst.started or not dst.spec.reachable
                or dst.record.public_key != record.public_key):
            return self._connect_result(index, record, ConnectOutcome.UNREACHABLE, "tcp")
        if self.connected(index, target):
            return ConnectOutcome.CONNECTED
        cfg = self.config
        outbound = src.outbound - (1 if replacing is not None else 0)
        if not check_limits(outbound, dst.inbound, cfg.max_outbound, cfg.max_inbound):
            return self._connect_result(index, record, ConnectOutcome.REFUSED_LIMIT, "tcp,limits")
        if not same_service(src.spec.service, dst.spec.service):
            return self._connect_result(index, record, ConnectOutcome.REFUSED_TUPLE, "tcp,limits,tuple")
        if replacing is not None:
            self.disconnect(replacing)
        link = PeerConnection(src.record.public_key, dst.record.public_key, index, target, self.now)
        self.links[frozenset((index, target))] = link
        src.outbound += 1
        src.out_links.append(link)
        dst.inbound += 1
        return self._connect_result(index, record, ConnectOutcome.CONNECTED, "tcp,limits,tuple")

    def _connect_result(self, index, record, outcome, steps):
        self._log(index, f"dial:{outcome.value}", f"{record.ip}:{record.tcp_port} [{steps}]")
        return outcome

    def disconnect(self, link: PeerConnection) -> None:
        del self.links[frozenset((link.a_index, link.b_index))]
        a, b = self.nodes[link.a_index], self.nodes[link.b_index]
        a.outbound -= 1
        a.out_links.remove(link)
        b.inbound -= 1
        self._log(link.a_index, "hangup", f"{b.record.ip}:{b.record.tcp_port}")

    # -- results ------------------------------------------------------------

    def states(self) -> list[NodeState]:
        cfg = self.config
        return [
            NodeState(
                index=n.index, record=n.record, protocol=cfg.protocol, service=n.spec.service,
                started=n.started, inbound=n.inbound, outbound=n.outbound,
                table=tuple(n.disc.table.records()) if n.started else (),
                reachable=n.spec.reachable, expose_agent=n.spec.expose_agent,
                max_inbound=cfg.max_inbound, max_outbound=cfg.max_outbound,
            )
            for n in self.nodes
        ]

    def result(self) -> SimResult:
        states = self.states()
        return SimResult(
            nodes=states,
            connections=sorted(self.links.values(), key=lambda c: (c.established_at, c.a_index, c.b_index)),
            graph=DhtGraph.from_states(states),
            event_log=list(self.event_log),
            tables=[n.disc.table if n.started else None for n in self.nodes],
        )


def run(config: SimConfig) -> SimResult:
    return Network(config).run()


class StaticNetwork:
    """A frozen network (e.g. a stored sim result) that answers crawler and prober queries."""

    def __init__(self, states: list[NodeState], bootnodes: list[NodeRecord] | None = None):
        self.states = [s for s in states if s.started]
        self._by_udp = {s.record.udp_endpoint: s for s in self.states}
        self._by_tcp = {s.record.tcp_endpoint: s for s in self.states}
        self._tables: dict[int, RoutingTable] = {}
        self._boot = bootnodes if bootnodes is not None else [s.record for s in self.states[:1]]

    def bootstrap(self) -> list[NodeRecord]:
        return list(self._boot)

    def _state(self, record: NodeRecord) -> NodeState | None:
        s = self._by_udp.get(record.udp_endpoint)
        if s is None or s.record.public_key != record.public_key:
            return None
        return s

    def table(self, record: NodeRecord) -> RoutingTable | None:
        s = self._state(record)
        if s is None:
            return None
        if s.index not in self._tables:
            tables = PersistenceTables(live_nodes=list(s.table), seed_nodes=list(s.table))
            self._tables[s.index] = RoutingTable.load(s.record.public_key, tables)
        return self._tables[s.index]

    def find_node_v4(self, record: NodeRecord, target: NodeId) -> list[NodeRecord] | None:
        table = self.table(record)
        return None if table is None else neighbors_v4(table, target)

    def find_node_v5(self, record: NodeRecord, distance: int) -> list[NodeRecord] | None:
        table = self.table(record)
        return None if table is None else nodes_v5(table, distance)

    def service_at(self, ip: str, tcp_port: int) -> RemoteService | None:
        s = self._by_tcp.get((ip, tcp_port))
        if s is None:
            return None
        return RemoteService(s.record, s.service, reachable=s.reachable, expose_agent=s.expose_agent,
                             inbound=s.inbound, outbound=s.outbound,
                             max_inbound=s.max_inbound, max_outbound=s.max_outbound)


# -- scenarios ---------------------------------------------------------------

def _ip(block: int, i: int) -> str:
    return f"10.{block}.{i // 250}.{i % 250 + 1}"


@dataclass
class Exp1Result:
    protocol: str
    nodes: int
    services: int
    public_keys: int
    wcc_count: int
    max_wcc: int
    result: SimResult = field(repr=False, default=None)


def exp1_config(protocol: str, n_nodes: int, seed: int, shared_key: bool = True,
                duration: int = 30 * MINUTE) -> SimConfig:
    service = load_catalog()[0]
    specs = [
        NodeSpec(ip=_ip(0, i), service=service, key=SharedKey() if shared_key else None,
                 bootnodes=(0,) if i else (), start_time=i * 100)
        for i in range(n_nodes)
    ]
    return SimConfig(seed=seed, node_specs=specs, protocol=protocol, duration=duration)


def scenario_exp1(protocol: str, n_nodes: int, seed: int, shared_key: bool = True,
                  duration: int = 30 * MINUTE) -> Exp1Result:
    """Every node under one public key: report weakly connected components of the DHT graph."""
    res = run(exp1_config(protocol, n_nodes, seed, shared_key, duration))
    comps = res.graph.components()
    keys = {s.record.public_key for s in res.nodes}
    return Exp1Result(protocol, n_nodes, n_nodes, len(keys), len(comps),
                      max((len(c) for c in comps), default=0), res)


@dataclass
class Exp2Result:
    protocol: str
    node1: tuple[int, int]
    node2: tuple[int, int]
    result: SimResult = field(repr=False, default=None)


NODE1, NODE2 = 0, -1


def exp2_config(seed: int, protocol: str = "v4", shared_key: bool = True,
                background: int = 200) -> SimConfig:
    """Node 1 (service A) first, then the background, then Node 2 (service B) an hour in.

    Background nodes split evenly between the two services and bootstrap
    from Node 1 and the first background node. Node 2 uses the same
    bootstrap list; when it shares Node 1's key the first entry is its own
    key and only the second one is usable.
    """
    catalog = load_catalog()
    service_a, service_b = catalog[0], catalog[4]
    rng = random.Random(f"exp2/{seed}")
    key = SharedKey() if shared_key else None
    specs = [NodeSpec(ip="10.1.0.1", service=service_a, key=key)]
    for j in range(background):
        specs.append(NodeSpec(
            ip=_ip(3, j), service=service_a if j % 2 == 0 else service_b,
            start_time=SECOND + j * 1500 + rng.randrange(1000),
            bootnodes=(0, 1), dialer="eager",
        ))
    specs.append(NodeSpec(ip="10.2.0.1", service=service_b, key=key,
                          start_time=60 * MINUTE, bootnodes=(0, 1)))
    return SimConfig(seed=seed, node_specs=specs, protocol=protocol, duration=90 * MINUTE)


def scenario_exp2(seed: int, protocol: str = "v4", shared_key: bool = True,
                  background: int = 200) -> Exp2Result:
    res = run(exp2_config(seed, protocol, shared_key, background))
    return Exp2Result(protocol, res.counts(0), res.counts(len(res.nodes) - 1), res)


def mesh_config(n_nodes: int, seed: int, protocol: str = "v4", duration: int = 20 * MINUTE,
                services: Sequence[ServiceIdentity] | None = None) -> SimConfig:
    """Unique-key nodes sharing one bootnode, left to converge; services cycle if given."""
    specs = [
        NodeSpec(ip=_ip(5, i), service=services[i % len(services)] if services else None,
                 bootnodes=(0,) if i else (), start_time=i * 100, dialer="none")
        for i in range(n_nodes)
    ]
    return SimConfig(seed=seed, node_specs=specs, protocol=protocol, duration=duration)
