import random

import pytest

from conftest import make_record, random_pk

from keyreuse.dht import InsertOutcome
from keyreuse.discovery import (
    FINDNODE_V4,
    MINUTE,
    NODES_V5,
    PING,
    PING_V5,
    WHOAREYOU,
    DiscoveryNode,
    Message,
    Timer,
    nodes_v5,
)
from keyreuse.identity import NodeId


class Pump:
    """Synchronous delivery between a handful of nodes; timers fire after the queue drains."""

    def __init__(self, *nodes):
        self.nodes = {n.record.udp_endpoint: n for n in nodes}
        self.now = 0
        self.sent = []

    def run(self, outputs, source, fire_timers=True):
        queue = [(source, o) for o in outputs]
        timers = []
        while queue or (fire_timers and timers):
            if not queue:
                timers.sort(key=lambda t: t[1].delay)
                node, timer = timers.pop(0)
                queue += [(node, o) for o in node.on_timer(timer.token, self.now)]
                continue
            node, out = queue.pop(0)
            if isinstance(out, Timer):
                timers.append((node, out))
                continue
            self.sent.append(out.kind)
            self.now += 1
            dst = self.nodes.get(out.to_addr)
            if dst is not None:
                queue += [(dst, o) for o in dst.handle(out, self.now)]


def pair(protocol="v4", seed=0):
    rng = random.Random(seed)
    a = DiscoveryNode(make_record(random_pk(rng), 1), protocol)
    b = DiscoveryNode(make_record(random_pk(rng), 2), protocol)
    return a, b


class TestV4:
    def test_ping_verifies_both_ways(self):
        a, b = pair()
        Pump(a, b).run(a.ping(b.record, 0), a)
        assert b.record.public_key in a.table
        assert a.record.public_key in b.table

    def test_unverified_findnode_dropped(self):
        a, b = pair()
        msg = Message(FINDNODE_V4, a.record, b.record.public_key, b.record.udp_endpoint, 0,
                      request_id=1, target=NodeId.from_int(3))
        assert b.handle(msg, 0) == []
        assert b.dropped[-1][3] == "sender endpoint not verified"

    def test_lookup_bonds_before_querying(self):
        rng = random.Random(3)
        a, b = pair(seed=3)
        for i in range(20):
            b.table.insert(make_record(random_pk(rng), 10 + i), 0)
        a.table.insert(b.record, 0)
        done = []
        pump = Pump(a, b)
        pump.run(a.lookup(NodeId.from_int(rng.getrandbits(256)), 0, done.append), a)
        assert done and len(done[0]) == 16
        # bonding ping precedes the query
        assert pump.sent.index(PING) < pump.sent.index(FINDNODE_V4)
        assert not b.dropped

    def test_reply_cap(self):
        a, b = pair()
        recs = tuple(make_record(random_pk(random.Random(i)), i + 5) for i in range(17))
        with pytest.raises(ValueError):
            Message("NeighborsV4", a.record, b.record.public_key, b.record.udp_endpoint, 0, records=recs)

    def test_v5_message_dropped_by_v4_node(self):
        a, b = pair()
        msg = Message(PING_V5, a.record, b.record.public_key, b.record.udp_endpoint, 0)
        assert b.handle(msg, 0) == []
        assert b.dropped[-1][3] == "wrong protocol"

    def test_shared_key_peer_is_rejected_as_self(self):
        a, _ = pair()
        twin = DiscoveryNode(make_record(a.record.public_key, 9), "v4")
        Pump(a, twin).run(a.ping(twin.record, 0), a)
        assert len(a.table) == 0 and len(twin.table) == 0
        assert a.insert_outcomes[InsertOutcome.REJECTED_SELF] >= 1


class TestV5:
    def test_session_handshake_gates_requests(self):
        a, b = pair("v5")
        pump = Pump(a, b)
        pump.run(a.ping(b.record, 0), a)
        assert pump.sent[:3] == [PING_V5, WHOAREYOU, "Handshake"]
        assert a.has_session(b.record) and b.has_session(a.record)
        assert b.record.public_key in a.table and a.record.public_key in b.table

    def test_findnode_distance_range(self):
        a, b = pair("v5")
        b._sessions.add((a.record.public_key, a.record.ip, a.record.udp_port))
        bad = Message("FindNodeV5", a.record, b.record.public_key, b.record.udp_endpoint, 0,
                      request_id=7, distance=17)
        (reply,) = b.handle(bad, 0)
        assert reply.kind == NODES_V5 and reply.error and not reply.records

    def test_nodes_v5_returns_bucket(self):
        a, _ = pair("v5")
        rng = random.Random(5)
        for i in range(100):
            a.table.insert(make_record(random_pk(rng), i + 10), 0)
        for d in range(17):
            assert nodes_v5(a.table, d) == a.table.bucket(d)[:16]
        with pytest.raises(ValueError):
            nodes_v5(a.table, -1)


class TestRefresh:
    def test_two_missed_pings_evict_and_promote(self):
        rng = random.Random(11)
        node = DiscoveryNode(make_record(random_pk(rng), 1), "v4")
        owner = node.table.owner_id
        same_bucket = []
        while len(same_bucket) < 17:
            rec = make_record(random_pk(rng), len(same_bucket) + 2)
            if rec.node_id[0] >> 7 != owner[0] >> 7:
                same_bucket.append(rec)
        for r in same_bucket:
            node.table.insert(r, 0)
        tail = node.table.bucket(16)[-1]
        spare = same_bucket[-1]
        node.refresh(MINUTE, self_lookup=False)  # first check ping goes unanswered
        node.refresh(2 * MINUTE, self_lookup=False)  # first miss, new ping
        assert tail.public_key in node.table
        node.refresh(3 * MINUTE, self_lookup=False)  # second miss: evicted
        assert tail.public_key not in node.table
        assert spare.public_key in node.table
        assert node.table.failed_requests[-1].reason == "missed pings"

    def test_answered_ping_clears_misses(self):
        a, b = pair(seed=4)
        a.table.insert(b.record, 0)
        pump = Pump(a, b)
        for t in (MINUTE, 2 * MINUTE, 3 * MINUTE, 4 * MINUTE):
            pump.now = t
            pump.run(a.refresh(t, self_lookup=False), a)
        assert b.record.public_key in a.table
