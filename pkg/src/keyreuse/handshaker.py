"""Service identification by handshake.

v4-style services are identified by the four-element status tuple; a
handshake completes only when every element matches. v5-style services are
identified by the agent string the remote chooses to expose, if any.
"""
from __future__ import annotations

import enum
import random
from collections import Counter
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable, Protocol, Sequence

from .identity import NodeRecord, PublicKey

MAX_PEERS = 50
MAX_OUTBOUND = 16
MAX_INBOUND = MAX_PEERS - MAX_OUTBOUND  # 34


@dataclass(frozen=True)
class ServiceTuple:
    protocol_version: int
    network_id: int
    genesis_hash: bytes
    fork_id: bytes

    def __post_init__(self) -> None:
        if len(self.genesis_hash) != 32:
            raise ValueError("genesis_hash must be 32 bytes")
        if len(self.fork_id) != 4:
            raise ValueError("fork_id must be 4 bytes")


@dataclass(frozen=True)
class ServiceIdentity:
    label: str
    tuple: ServiceTuple | None = None
    agent: str | None = None

    def __post_init__(self) -> None:
        if (self.tuple is None) == (self.agent is None):
            raise ValueError("a service identity carries exactly one of tuple or agent")

    @property
    def key(self) -> str:
        """Census key, e.g. ``ETH Mainnet#9f3d`` or the bare agent string."""
        if self.tuple is not None:
            return f"{self.label}#{self.tuple.fork_id.hex()[:4]}"
        return self.agent


def same_service(a: ServiceIdentity | None, b: ServiceIdentity | None) -> bool:
    if a is None or b is None:
        return False
    if a.tuple is not None and b.tuple is not None:
        return a.tuple == b.tuple
    return a.agent is not None and a.agent == b.agent


def load_catalog(path=None) -> list[ServiceIdentity]:
    """Known v4 services, read from the bundled (or a user supplied) table."""
    if path is None:
        text = resources.files("keyreuse").joinpath("data/services.tsv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    catalog = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        network_id, label, version, genesis, fork = line.split("\t")
        st = ServiceTuple(int(version), int(network_id), bytes.fromhex(genesis), bytes.fromhex(fork))
        catalog.append(ServiceIdentity(label, tuple=st))
    return catalog


def label_for(network_id: int, catalog: Sequence[ServiceIdentity] | None = None) -> str:
    for ident in catalog if catalog is not None else load_catalog():
        if ident.tuple.network_id == network_id:
            return ident.label
    return f"Network {network_id}"


class Outcome(str, enum.Enum):
    IDENTIFIED = "identified"
    REFUSED_LIMIT = "refused_limit"
    REFUSED_TUPLE = "refused_tuple"
    NO_AGENT = "no_agent"
    UNREACHABLE = "unreachable"


@dataclass
class RemoteService:
    """What a prober can reach at a node's service port."""

    record: NodeRecord
    identity: ServiceIdentity | None
    reachable: bool = True
    expose_agent: bool = True
    inbound: int = 0
    outbound: int = 0
    max_inbound: int = MAX_INBOUND
    max_outbound: int = MAX_OUTBOUND


class ServiceNetwork(Protocol):
    def service_at(self, ip: str, tcp_port: int) -> RemoteService | None: ...


@dataclass(frozen=True)
class HandshakeRecord:
    snapshot_id: str
    public_key: PublicKey
    ip: str
    tcp_port: int
    protocol: str
    outcome: Outcome
    identity: ServiceIdentity | None = None
    at: int = 0
    steps: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if (self.outcome is Outcome.IDENTIFIED) != (self.identity is not None):
            raise ValueError("identity is present exactly when the outcome is identified")

    @property
    def dedup_key(self) -> tuple[PublicKey, str, int]:
        return (self.public_key, self.ip, self.tcp_port)


def check_limits(initiator_outbound: int, target_inbound: int,
                 max_outbound: int = MAX_OUTBOUND, max_inbound: int = MAX_INBOUND) -> bool:
    """True when both sides have a free slot for a new connection."""
    return initiator_outbound < max_outbound and target_inbound < max_inbound


def _ref(remote: RemoteService, snapshot_id: str, protocol: str, at: int) -> dict:
    r = remote.record
    return dict(snapshot_id=snapshot_id, public_key=r.public_key, ip=r.ip,
                tcp_port=r.tcp_port, protocol=protocol, at=at)


def handshake_v4(local: ServiceTuple, remote: RemoteService, *, snapshot_id: str = "",
                 at: int = 0, local_outbound: int = 0,
                 max_outbound: int = MAX_OUTBOUND) -> HandshakeRecord:
    ref = _ref(remote, snapshot_id, "v4", at)
    steps = ["tcp"]
    if not remote.reachable:
        return HandshakeRecord(outcome=Outcome.UNREACHABLE, steps=tuple(steps), **ref)
    steps.append("limits")
    if not check_limits(local_outbound, remote.inbound, max_outbound, remote.max_inbound):
        return HandshakeRecord(outcome=Outcome.REFUSED_LIMIT, steps=tuple(steps), **ref)
    # encrypted framing carries no observable behaviour here
    steps.append("rlpx")
    steps.append("tuple")
    ident = remote.identity
    if ident is None or ident.tuple is None or ident.tuple != local:
        return HandshakeRecord(outcome=Outcome.REFUSED_TUPLE, steps=tuple(steps), **ref)
    return HandshakeRecord(outcome=Outcome.IDENTIFIED, identity=ident, steps=tuple(steps), **ref)


def probe_v5(remote: RemoteService, *, snapshot_id: str = "", at: int = 0) -> HandshakeRecord:
    ref = _ref(remote, snapshot_id, "v5", at)
    if not remote.reachable:
        return HandshakeRecord(outcome=Outcome.UNREACHABLE, steps=("tcp",), **ref)
    ident = remote.identity
    if not remote.expose_agent or ident is None or ident.agent is None:
        return HandshakeRecord(outcome=Outcome.NO_AGENT, steps=("tcp", "agent"), **ref)
    return HandshakeRecord(outcome=Outcome.IDENTIFIED, identity=ident, steps=("tcp", "agent"), **ref)


def identify_v4(remote: RemoteService, catalog: Sequence[ServiceIdentity], **kw) -> HandshakeRecord:
    """Try each known tuple in turn until one completes.

    Unreachable or saturated remotes end the attempt at once; a remote whose
    tuple is not in the catalog comes back ``refused_tuple``.
    """
    result = None
    for known in catalog:
        result = handshake_v4(known.tuple, remote, **kw)
        if result.outcome is not Outcome.REFUSED_TUPLE:
            break
    if result is None:
        raise ValueError("empty service catalog")
    if result.outcome is Outcome.IDENTIFIED:
        # keep the catalog's label rather than whatever the remote calls itself
        known = next(k for k in catalog if k.tuple == result.identity.tuple)
        result = replace(result, identity=known)
    return result


def sweep(snapshot, network: ServiceNetwork, seed: int = 0,
          catalog: Sequence[ServiceIdentity] | None = None) -> list[HandshakeRecord]:
    """Handshake once with every distinct ``(public_key, ip, tcp_port)`` of a snapshot."""
    if catalog is None:
        catalog = load_catalog()
    seen = {}
    for obs in snapshot.observations:
        seen.setdefault((obs.public_key, obs.ip, obs.tcp_port), obs)
    order = sorted(seen, key=lambda k: (k[0].hex(), k[1], k[2]))
    random.Random(f"sweep/{seed}").shuffle(order)
    out = []
    for key in order:
        obs = seen[key]
        remote = network.service_at(obs.ip, obs.tcp_port)
        if remote is None or remote.record.public_key != obs.public_key:
            # nothing listening, or a different identity answers: auth fails
            out.append(HandshakeRecord(snapshot.snapshot_id, obs.public_key, obs.ip, obs.tcp_port,
                                       obs.protocol, Outcome.UNREACHABLE, at=snapshot.ended_at,
                                       steps=("tcp",)))
            continue
        if obs.protocol == "v5":
            out.append(probe_v5(remote, snapshot_id=snapshot.snapshot_id, at=snapshot.ended_at))
        else:
            out.append(identify_v4(remote, catalog, snapshot_id=snapshot.snapshot_id,
                                   at=snapshot.ended_at))
    return out


@dataclass(frozen=True)
class CensusRow:
    service: str
    count: int
    fraction: float


def service_census(records: Iterable[HandshakeRecord]) -> list[CensusRow]:
    """Count identified services with the public key as the unit of counting."""
    holders: dict[str, set[PublicKey]] = {}
    for rec in records:
        if rec.outcome is Outcome.IDENTIFIED:
            holders.setdefault(rec.identity.key, set()).add(rec.public_key)
    counts = Counter({k: len(v) for k, v in holders.items()})
    total = sum(counts.values())
    rows = [CensusRow(k, n, n / total) for k, n in counts.items()]
    rows.sort(key=lambda r: (-r.count, r.service))
    return rows
