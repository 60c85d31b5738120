"""Kademlia routing table: 17 buckets of 16, FIFO replacement lists, persistence tables.

A public key occupies at most one slot across all buckets and replacement
lists. When a second endpoint announces a key that is already present, the
existing entry wins for as long as it stays in the table.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from .identity import NodeId, NodeRecord, PublicKey, node_id

BUCKET_COUNT = 17
BUCKET_SIZE = 16
REPLACEMENT_SIZE = 16
TABLE_CAPACITY = BUCKET_COUNT * BUCKET_SIZE  # 272
FAILED_REQUESTS_LIMIT = 10_000
# logdist values up to this one share bucket 0
_BUCKET_MIN_DISTANCE = 240


class InsertOutcome(enum.Enum):
    ADDED = "added"
    REFRESHED = "refreshed"
    QUEUED_REPLACEMENT = "queued_replacement"
    IGNORED_DUPLICATE_KEY = "ignored_duplicate_key"
    REJECTED_SELF = "rejected_self"

    # members are singletons, identity hashing is enough and much cheaper
    __hash__ = object.__hash__


class TableLoadError(ValueError):
    pass


def logdist(a: NodeId, b: NodeId) -> int:
    """Bit length of ``a XOR b``; 0 for equal ids, 256 when the top bit differs."""
    return (int(a) ^ int(b)).bit_length()


def bucket_index(owner: NodeId, other: NodeId) -> int:
    d = logdist(owner, other)
    if d == 0:
        raise ValueError("bucket_index of a node with itself")
    return max(0, d - _BUCKET_MIN_DISTANCE)


@dataclass(eq=False)
class Entry:
    record: NodeRecord
    last_seen: int
    id_int: int = field(repr=False, default=0)

    def __post_init__(self) -> None:
        self.id_int = self.record.id_int


@dataclass(frozen=True)
class FailedRequest:
    node_id: NodeId
    reason: str
    timestamp: int


@dataclass
class PersistenceTables:
    """Disk-side view of a table: live nodes, failed requests, seed nodes."""

    live_nodes: list[NodeRecord] = field(default_factory=list)
    failed_requests: list[FailedRequest] = field(default_factory=list)
    seed_nodes: list[NodeRecord] = field(default_factory=list)


class RoutingTable:
    def __init__(self, owner: PublicKey):
        self.owner = PublicKey(owner)
        self.owner_id = node_id(self.owner)
        self._owner_int = int(self.owner_id)
        # each bucket is ordered most-recently-validated first
        self.buckets: list[list[Entry]] = [[] for _ in range(BUCKET_COUNT)]
        self.replacements: list[deque[Entry]] = [deque() for _ in range(BUCKET_COUNT)]
        self.failed_requests: deque[FailedRequest] = deque(maxlen=FAILED_REQUESTS_LIMIT)
        # key -> (bucket, in_replacement_list)
        self._slots: dict[PublicKey, tuple[int, bool]] = {}
        self._entries: dict[PublicKey, Entry] = {}
        self._ids: dict[NodeId, PublicKey] = {}
        # bucket entries and their ids for closest(); rebuilt after membership changes
        self._flat: tuple[list[Entry], list[int]] | None = None

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)

    def __contains__(self, key: PublicKey) -> bool:
        slot = self._slots.get(key)
        return slot is not None and not slot[1]

    def __iter__(self):
        return iter(self.records())

    def records(self) -> list[NodeRecord]:
        return [e.record for b in self.buckets for e in b]

    def replacement_records(self) -> list[NodeRecord]:
        return [e.record for r in self.replacements for e in r]

    def bucket(self, index: int) -> list[NodeRecord]:
        return [e.record for e in self.buckets[index]]

    def get(self, key: PublicKey) -> NodeRecord | None:
        entry = self._find(key)
        return entry.record if entry is not None else None

    def last_seen(self, key: PublicKey) -> int | None:
        entry = self._find(key)
        return entry.last_seen if entry is not None else None

    def holds(self, key: PublicKey) -> bool:
        """True if the key occupies a bucket or a replacement slot."""
        return key in self._slots

    def _find(self, key: PublicKey) -> Entry | None:
        return self._entries.get(key)

    def _index(self, record: NodeRecord) -> int:
        d = (self._owner_int ^ record.id_int).bit_length()
        return max(0, d - _BUCKET_MIN_DISTANCE)

    def insert(self, record: NodeRecord, now: int) -> InsertOutcome:
        key = record.public_key
        if key == self.owner:
            return InsertOutcome.REJECTED_SELF
        slot = self._slots.get(key)
        if slot is not None:
            index, in_replacement = slot
            entry = self._entries[key]
            if not entry.record.same_endpoint(record):
                return InsertOutcome.IGNORED_DUPLICATE_KEY
            if record.seq > entry.record.seq:
                entry.record = record
                self._flat = None
            entry.last_seen = now
            if not in_replacement:
                bucket = self.buckets[index]
                bucket.remove(entry)
                bucket.insert(0, entry)
            return InsertOutcome.REFRESHED

        index = self._index(record)
        bucket = self.buckets[index]
        entry = Entry(record, now)
        if len(bucket) < BUCKET_SIZE:
            bucket.insert(0, entry)
            self._slots[key] = (index, False)
            self._entries[key] = entry
            self._ids[record.node_id] = key
            self._flat = None
            return InsertOutcome.ADDED
        queue = self.replacements[index]
        if len(queue) >= REPLACEMENT_SIZE:
            dropped = queue.popleft()
            self._forget(dropped.record)
        queue.append(entry)
        self._slots[key] = (index, True)
        self._entries[key] = entry
        self._ids[record.node_id] = key
        return InsertOutcome.QUEUED_REPLACEMENT

    def _forget(self, record: NodeRecord) -> None:
        del self._slots[record.public_key]
        del self._entries[record.public_key]
        del self._ids[record.node_id]

    def evict_and_promote(self, dead: NodeId, now: int = 0, reason: str = "liveness") -> NodeRecord | None:
        """Drop ``dead`` from its bucket and promote the oldest replacement, if any."""
        key = self._ids.get(dead)
        if key is None:
            return None
        index, in_replacement = self._slots[key]
        if in_replacement:
            return None
        bucket = self.buckets[index]
        gone = self._entries[key]
        bucket.remove(gone)
        self._forget(gone.record)
        self._flat = None
        self.record_failure(dead, reason, now)
        queue = self.replacements[index]
        if not queue:
            return None
        promoted = queue.popleft()
        bucket.append(promoted)
        self._slots[promoted.record.public_key] = (index, False)
        return promoted.record

    def record_failure(self, node: NodeId, reason: str, now: int) -> None:
        self.failed_requests.append(FailedRequest(node, reason, now))

    def closest(self, target: NodeId, k: int) -> list[NodeRecord]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if self._flat is None:
            entries = [e for b in self.buckets for e in b]
            self._flat = (entries, [e.id_int for e in entries])
        entries, ids = self._flat
        dist = map(int(target).__xor__, ids)
        ranked = sorted(zip(dist, range(len(entries))))[:k]
        return [entries[i].record for _, i in ranked]

    def persist(self) -> PersistenceTables:
        live = self.records()
        return PersistenceTables(
            live_nodes=list(live),
            failed_requests=list(self.failed_requests),
            seed_nodes=list(live),
        )

    @classmethod
    def load(cls, owner: PublicKey, tables: PersistenceTables, now: int = 0) -> "RoutingTable":
        """Rebuild a table from persisted seed nodes, keeping their stored order."""
        table = cls(owner)
        for i, record in enumerate(tables.seed_nodes):
            if not isinstance(record, NodeRecord):
                raise TableLoadError(f"seed record #{i} is not a node record: {record!r}")
        # inserts land at the bucket front, so feed them back to front
        for record in reversed(tables.seed_nodes):
            if record.public_key != table.owner:
                table.insert(record, now)
        for i, failure in enumerate(tables.failed_requests):
            if not isinstance(failure, FailedRequest):
                raise TableLoadError(f"failed request #{i} is malformed: {failure!r}")
            table.failed_requests.append(failure)
        return table
