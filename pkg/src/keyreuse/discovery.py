"""Discv4/Discv5-style discovery handlers and periodic table maintenance.

A :class:`DiscoveryNode` owns one routing table and reacts to messages.
Every handler takes the message and the current logical time and returns
the messages (and timers) it wants sent; nothing here touches a clock or a
socket, so the simulator decides delivery order.

Time is measured in integer ticks of one millisecond.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Union

from .dht import BUCKET_COUNT, InsertOutcome, RoutingTable, logdist
from .identity import NodeId, NodeRecord, PublicKey

SECOND = 1_000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE

MAX_REPLY = 16
ALPHA = 3
VERIFICATION_TTL = 12 * HOUR
MISSED_PINGS_TO_EVICT = 2

PING = "Ping"
PONG = "Pong"
FINDNODE_V4 = "FindNodeV4"
NEIGHBORS_V4 = "NeighborsV4"
ENR_REQUEST = "ENRRequest"
ENR_RESPONSE = "ENRResponse"
PING_V5 = "PingV5"
PONG_V5 = "PongV5"
FINDNODE_V5 = "FindNodeV5"
NODES_V5 = "NodesV5"
WHOAREYOU = "WhoAreYou"
HANDSHAKE = "Handshake"

V4_KINDS = frozenset({PING, PONG, FINDNODE_V4, NEIGHBORS_V4, ENR_REQUEST, ENR_RESPONSE})
V5_KINDS = frozenset({PING_V5, PONG_V5, FINDNODE_V5, NODES_V5, WHOAREYOU, HANDSHAKE,
                      ENR_REQUEST, ENR_RESPONSE})
# v5 requests that need an established session
_V5_GATED = frozenset({PING_V5, FINDNODE_V5})

Endpoint = tuple  # (public_key, ip, udp_port)


def endpoint(record: NodeRecord) -> Endpoint:
    return (record.public_key, record.ip, record.udp_port)


@dataclass(frozen=True)
class Message:
    kind: str
    sender: NodeRecord
    to: PublicKey
    to_addr: tuple[str, int]
    sim_time: int
    request_id: int = 0
    target: NodeId | None = None
    distance: int | None = None
    records: tuple[NodeRecord, ...] = ()
    record: NodeRecord | None = None
    nonce: int | None = None
    inner: "Message | None" = None
    error: str | None = None

    def __post_init__(self) -> None:
        if len(self.records) > MAX_REPLY:
            raise ValueError(f"{self.kind} carries {len(self.records)} records, limit is {MAX_REPLY}")

    @property
    def sender_endpoint(self) -> Endpoint:
        return endpoint(self.sender)


@dataclass(frozen=True)
class Timer:
    delay: int
    token: tuple


Output = Union[Message, Timer]


@dataclass
class LivenessState:
    endpoint_verified: dict = field(default_factory=dict)
    last_pong: dict = field(default_factory=dict)

    def is_verified(self, key: Endpoint, now: int) -> bool:
        t = self.endpoint_verified.get(key)
        return t is not None and now - t < VERIFICATION_TTL

    def mark(self, key: Endpoint, now: int) -> None:
        self.endpoint_verified[key] = now
        self.last_pong[key] = now


def neighbors_v4(table: RoutingTable, target: NodeId) -> list[NodeRecord]:
    return table.closest(target, MAX_REPLY)


def nodes_v5(table: RoutingTable, distance: int) -> list[NodeRecord]:
    if not 0 <= distance < BUCKET_COUNT:
        raise ValueError(f"distance {distance} outside [0, {BUCKET_COUNT - 1}]")
    return table.bucket(distance)[:MAX_REPLY]


def v5_distance(node: NodeId, target: NodeId) -> int:
    return max(0, logdist(node, target) - 240)


@dataclass
class _PendingPing:
    key: Endpoint
    record: NodeRecord
    sent_at: int
    purpose: str  # "check" | "verify" | "bond"


@dataclass
class _Lookup:
    id: int
    target: NodeId
    target_int: int
    on_done: Callable[[list[NodeRecord]], None]
    seen: dict = field(default_factory=dict)
    asked: set = field(default_factory=set)
    pending: dict = field(default_factory=dict)  # request id -> endpoint


class DiscoveryNode:
    """Protocol state of one node: routing table, liveness, sessions, lookups."""

    def __init__(self, record: NodeRecord, protocol: str = "v4", *,
                 ping_timeout: int = SECOND, query_timeout: int = SECOND,
                 bond_wait: int = 500, stale_after: int = MINUTE):
        if protocol not in ("v4", "v5"):
            raise ValueError(f"unknown protocol {protocol!r}")
        self.record = record
        self.protocol = protocol
        self.table = RoutingTable(record.public_key)
        self.liveness = LivenessState()
        self.ping_timeout = ping_timeout
        self.query_timeout = query_timeout
        self.bond_wait = bond_wait
        self.stale_after = stale_after
        self.on_insert: Callable[[NodeRecord, InsertOutcome, int], None] | None = None
        self.insert_outcomes: Counter = Counter()
        self.last_insert: tuple[NodeRecord, InsertOutcome] | None = None
        self.dropped: list[tuple[int, str, Endpoint, str]] = []
        self._ids = itertools.count(1)
        self._answered: dict[Endpoint, int] = {}
        self._sessions: set[Endpoint] = set()
        self._pings: dict[int, _PendingPing] = {}
        self._missed: dict[PublicKey, int] = {}
        self._stash: dict[Endpoint, list[tuple[NodeRecord, int, NodeId]]] = {}
        self._bonding: set[Endpoint] = set()
        self._outstanding: dict[int, Message] = {}
        self._lookups: dict[int, _Lookup] = {}
        self._query_owner: dict[int, int] = {}

    # -- plumbing -----------------------------------------------------------

    def _msg(self, kind: str, to: NodeRecord, now: int, **kw) -> Message:
        return Message(kind, self.record, to.public_key, to.udp_endpoint, now, **kw)

    def _insert(self, record: NodeRecord, now: int) -> InsertOutcome:
        outcome = self.table.insert(record, now)
        self.insert_outcomes[outcome] += 1
        self.last_insert = (record, outcome)
        if self.on_insert is not None:
            self.on_insert(record, outcome, now)
        return outcome

    def _drop(self, msg: Message, now: int, reason: str) -> list[Output]:
        self.dropped.append((now, msg.kind, msg.sender_endpoint, reason))
        return []

    def has_session(self, record: NodeRecord) -> bool:
        return endpoint(record) in self._sessions

    # -- requests -----------------------------------------------------------

    def ping(self, record: NodeRecord, now: int, purpose: str = "check") -> list[Output]:
        rid = next(self._ids)
        self._pings[rid] = _PendingPing(endpoint(record), record, now, purpose)
        msg = self._msg(PING if self.protocol == "v4" else PING_V5, record, now, request_id=rid)
        if self.protocol == "v5":
            self._outstanding[rid] = msg
        return [msg]

    def request_enr(self, record: NodeRecord, now: int) -> list[Output]:
        return [self._msg(ENR_REQUEST, record, now, request_id=next(self._ids))]

    def _find_node(self, record: NodeRecord, lookup: _Lookup, now: int) -> list[Output]:
        rid = next(self._ids)
        key = endpoint(record)
        lookup.pending[rid] = key
        self._query_owner[rid] = lookup.id
        out: list[Output] = [Timer(self.query_timeout + self.bond_wait, ("query", rid))]
        if self.protocol == "v5":
            msg = self._msg(FINDNODE_V5, record, now, request_id=rid,
                            distance=v5_distance(record.node_id, lookup.target))
            self._outstanding[rid] = msg
            out.append(msg)
            return out
        answered = self._answered.get(key)
        if answered is not None and now - answered < VERIFICATION_TTL:
            out.append(self._msg(FINDNODE_V4, record, now, request_id=rid, target=lookup.target))
            return out
        # the remote has not verified us yet: ping it and wait for its ping back
        self._stash.setdefault(key, []).append((record, rid, lookup.target))
        if key not in self._bonding:
            self._bonding.add(key)
            out += self.ping(record, now, purpose="bond")
            out.append(Timer(self.bond_wait, ("bond", key)))
        return out

    def _flush(self, key: Endpoint, now: int) -> list[Output]:
        self._bonding.discard(key)
        out: list[Output] = []
        for record, rid, target in self._stash.pop(key, ()):
            if rid in self._query_owner:
                out.append(self._msg(FINDNODE_V4, record, now, request_id=rid, target=target))
        return out

    # -- dispatch -----------------------------------------------------------

    def handle(self, msg: Message, now: int) -> list[Output]:
        kinds = V4_KINDS if self.protocol == "v4" else V5_KINDS
        if msg.kind not in kinds:
            return self._drop(msg, now, "wrong protocol")
        if msg.kind in _V5_GATED and msg.sender_endpoint not in self._sessions:
            nonce = next(self._ids)
            return [self._msg(WHOAREYOU, msg.sender, now, request_id=msg.request_id, nonce=nonce)]
        handler = self._handlers[msg.kind]
        return handler(self, msg, now)

    def on_timer(self, token: tuple, now: int) -> list[Output]:
        if token[0] == "bond":
            return self._flush(token[1], now)
        if token[0] == "query":
            rid = token[1]
            if rid not in self._query_owner:
                return []
            lookup = self._lookups.get(self._query_owner.pop(rid))
            self._outstanding.pop(rid, None)
            if lookup is None:
                return []
            key = lookup.pending.pop(rid)
            self.table.record_failure(lookup.seen[key].node_id, "findnode timeout", now)
            return self._advance(lookup, now)
        raise ValueError(f"unknown timer {token!r}")

    # -- v4 handlers --------------------------------------------------------

    def handle_ping(self, msg: Message, now: int) -> list[Output]:
        key = msg.sender_endpoint
        kind = PONG if self.protocol == "v4" else PONG_V5
        out: list[Output] = [self._msg(kind, msg.sender, now, request_id=msg.request_id)]
        self._answered[key] = now
        if self.liveness.is_verified(key, now):
            self._insert(msg.sender, now)
        elif not any(p.key == key for p in self._pings.values()):
            out += self.ping(msg.sender, now, purpose="verify")
        if self.protocol == "v4":
            out += self._flush(key, now)
        return out

    def handle_pong(self, msg: Message, now: int) -> list[Output]:
        pending = self._pings.get(msg.request_id)
        if pending is None or pending.key != msg.sender_endpoint:
            return self._drop(msg, now, "unsolicited pong")
        del self._pings[msg.request_id]
        self._outstanding.pop(msg.request_id, None)
        self.liveness.mark(pending.key, now)
        self._missed.pop(msg.sender.public_key, None)
        self._insert(msg.sender, now)
        return []

    def handle_findnode_v4(self, msg: Message, now: int) -> list[Output]:
        if not self.liveness.is_verified(msg.sender_endpoint, now):
            return self._drop(msg, now, "sender endpoint not verified")
        records = tuple(neighbors_v4(self.table, msg.target))
        return [self._msg(NEIGHBORS_V4, msg.sender, now, request_id=msg.request_id, records=records)]

    def handle_neighbors(self, msg: Message, now: int) -> list[Output]:
        lid = self._query_owner.pop(msg.request_id, None)
        self._outstanding.pop(msg.request_id, None)
        if lid is None:
            return self._drop(msg, now, "unsolicited reply")
        lookup = self._lookups.get(lid)
        if lookup is None:
            return []
        lookup.pending.pop(msg.request_id, None)
        for record in msg.records:
            if record.public_key == self.record.public_key:
                continue
            self._insert(record, now)
            lookup.seen.setdefault(endpoint(record), record)
        return self._advance(lookup, now)

    def handle_enr_request(self, msg: Message, now: int) -> list[Output]:
        return [self._msg(ENR_RESPONSE, msg.sender, now, request_id=msg.request_id, record=self.record)]

    def handle_enr_response(self, msg: Message, now: int) -> list[Output]:
        return []

    # -- v5 handlers --------------------------------------------------------

    def handle_whoareyou(self, msg: Message, now: int) -> list[Output]:
        original = self._outstanding.get(msg.request_id)
        if original is None:
            return self._drop(msg, now, "whoareyou for unknown request")
        self._sessions.add(msg.sender_endpoint)
        return [self._msg(HANDSHAKE, msg.sender, now, request_id=msg.request_id,
                          nonce=msg.nonce, record=self.record, inner=replace(original, sim_time=now))]

    def handle_handshake(self, msg: Message, now: int) -> list[Output]:
        key = msg.sender_endpoint
        self._sessions.add(key)
        self.liveness.mark(key, now)
        self._insert(msg.sender, now)
        if msg.inner is None:
            return []
        return self.handle(msg.inner, now)

    def handle_findnode_v5(self, msg: Message, now: int) -> list[Output]:
        try:
            records = tuple(nodes_v5(self.table, msg.distance))
        except ValueError as exc:
            return [self._msg(NODES_V5, msg.sender, now, request_id=msg.request_id, error=str(exc))]
        return [self._msg(NODES_V5, msg.sender, now, request_id=msg.request_id, records=records)]

    _handlers = {
        PING: handle_ping,
        PONG: handle_pong,
        FINDNODE_V4: handle_findnode_v4,
        NEIGHBORS_V4: handle_neighbors,
        ENR_REQUEST: handle_enr_request,
        ENR_RESPONSE: handle_enr_response,
        PING_V5: handle_ping,
        PONG_V5: handle_pong,
        FINDNODE_V5: handle_findnode_v5,
        NODES_V5: handle_neighbors,
        WHOAREYOU: handle_whoareyou,
        HANDSHAKE: handle_handshake,
    }

    # -- lookup -------------------------------------------------------------

    def lookup(self, target: NodeId, now: int,
               on_done: Callable[[list[NodeRecord]], None] | None = None) -> list[Output]:
        """Start an iterative FindNode walk toward ``target``.

        ``on_done`` receives the 16 closest records learned once no closer
        unqueried node remains and nothing is in flight.
        """
        on_done = on_done or (lambda records: None)
        seeds = self.table.closest(target, MAX_REPLY)
        if not seeds:
            on_done([])
            return []
        lookup = _Lookup(next(self._ids), target, int(target), on_done)
        lookup.seen = {endpoint(r): r for r in seeds}
        self._lookups[lookup.id] = lookup
        return self._advance(lookup, now)

    def _advance(self, lookup: _Lookup, now: int) -> list[Output]:
        t = lookup.target_int
        seen = list(lookup.seen.values())
        dist = map(t.__xor__, [r.id_int for r in seen])
        ranked = [seen[i] for _, i in sorted(zip(dist, range(len(seen))))[:MAX_REPLY]]
        out: list[Output] = []
        for record in ranked:
            if len(lookup.pending) >= ALPHA:
                break
            key = endpoint(record)
            if key in lookup.asked:
                continue
            lookup.asked.add(key)
            out += self._find_node(record, lookup, now)
        if not lookup.pending:
            del self._lookups[lookup.id]
            lookup.on_done(ranked)
        return out

    # -- maintenance --------------------------------------------------------

    def refresh(self, now: int, self_lookup: bool = True) -> list[Output]:
        """One maintenance round.

        Unanswered liveness pings count as misses and the second consecutive
        miss evicts the entry. The least recently seen entry of every bucket
        gets pinged when stale, and a self lookup tops up sparse buckets.
        """
        out: list[Output] = []
        for rid, p in list(self._pings.items()):
            if now - p.sent_at < self.ping_timeout:
                continue
            del self._pings[rid]
            self._outstanding.pop(rid, None)
            if p.purpose != "check":
                continue
            pk = p.record.public_key
            misses = self._missed[pk] = self._missed.get(pk, 0) + 1
            if misses >= MISSED_PINGS_TO_EVICT:
                del self._missed[pk]
                held = self.table.get(pk)
                if held is not None and held.same_endpoint(p.record):
                    self.table.evict_and_promote(p.record.node_id, now, "missed pings")
        pinging = {p.key for p in self._pings.values()}
        for bucket in self.table.buckets:
            if not bucket:
                continue
            tail = bucket[-1]
            if now - tail.last_seen >= self.stale_after and endpoint(tail.record) not in pinging:
                out += self.ping(tail.record, now, purpose="check")
        if self_lookup and len(self.table):
            out += self.lookup(self.record.node_id, now)
        return out

