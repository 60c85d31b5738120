import itertools
import random

import pytest

from conftest import make_record, random_pk

from keyreuse.crawler import Observation, Snapshot
from keyreuse.fixtures import FixtureNetwork
from keyreuse.handshaker import (
    MAX_INBOUND,
    MAX_OUTBOUND,
    HandshakeRecord,
    Outcome,
    RemoteService,
    ServiceIdentity,
    ServiceTuple,
    check_limits,
    handshake_v4,
    identify_v4,
    label_for,
    load_catalog,
    probe_v5,
    same_service,
    service_census,
    sweep,
)

BASE = ServiceTuple(68, 1, bytes(range(32)), b"\x9f\x3d\x22\x54")
OTHER = ServiceTuple(67, 56, bytes(32), b"\x00\x00\x00\x01")


def remote(tuple_=BASE, **kw):
    rec = make_record(random_pk(random.Random(1)), 1)
    return RemoteService(rec, ServiceIdentity("svc", tuple=tuple_), **kw)


class TestTuples:
    @pytest.mark.parametrize("mask", list(itertools.product([True, False], repeat=4)))
    def test_all_field_subsets(self, mask):
        fields = [
            BASE.protocol_version if mask[0] else BASE.protocol_version + 1,
            BASE.network_id if mask[1] else 999,
            BASE.genesis_hash if mask[2] else bytes(32),
            BASE.fork_id if mask[3] else b"\xff\xff\xff\xff",
        ]
        rec = handshake_v4(BASE, remote(ServiceTuple(*fields)))
        assert (rec.outcome is Outcome.IDENTIFIED) == all(mask)
        if not all(mask):
            assert rec.outcome is Outcome.REFUSED_TUPLE

    def test_refusal_symmetric(self):
        a, b = handshake_v4(BASE, remote(OTHER)), handshake_v4(OTHER, remote(BASE))
        assert a.outcome is b.outcome is Outcome.REFUSED_TUPLE

    def test_field_lengths(self):
        with pytest.raises(ValueError):
            ServiceTuple(1, 1, b"\x00", b"\x00" * 4)
        with pytest.raises(ValueError):
            ServiceTuple(1, 1, bytes(32), b"\x00")

    def test_identity_needs_exactly_one(self):
        with pytest.raises(ValueError):
            ServiceIdentity("x")
        with pytest.raises(ValueError):
            ServiceIdentity("x", tuple=BASE, agent="y")

    def test_same_service(self):
        a = ServiceIdentity("a", tuple=BASE)
        assert same_service(a, ServiceIdentity("renamed", tuple=BASE))
        assert not same_service(a, ServiceIdentity("a", tuple=OTHER))
        assert not same_service(a, None)
        assert same_service(ServiceIdentity("c", agent="Teku"), ServiceIdentity("d", agent="Teku"))


class TestLimits:
    def test_inbound_boundary(self):
        assert handshake_v4(BASE, remote(inbound=MAX_INBOUND - 1)).outcome is Outcome.IDENTIFIED
        rec = handshake_v4(BASE, remote(inbound=MAX_INBOUND))
        assert rec.outcome is Outcome.REFUSED_LIMIT
        assert rec.steps == ("tcp", "limits")

    def test_outbound_boundary(self):
        assert handshake_v4(BASE, remote(), local_outbound=MAX_OUTBOUND - 1).outcome is Outcome.IDENTIFIED
        assert handshake_v4(BASE, remote(), local_outbound=MAX_OUTBOUND).outcome is Outcome.REFUSED_LIMIT

    def test_limit_precedes_tuple(self):
        rec = handshake_v4(BASE, remote(OTHER, inbound=MAX_INBOUND))
        assert rec.outcome is Outcome.REFUSED_LIMIT

    def test_step_order(self):
        rec = handshake_v4(BASE, remote())
        assert rec.steps == ("tcp", "limits", "rlpx", "tuple")

    def test_check_limits(self):
        assert check_limits(15, 33) and not check_limits(16, 0) and not check_limits(0, 34)

    def test_unreachable(self):
        assert handshake_v4(BASE, remote(reachable=False)).outcome is Outcome.UNREACHABLE


class TestProbe:
    def agent_remote(self, agent, **kw):
        rec = make_record(random_pk(random.Random(2)), 2)
        return RemoteService(rec, ServiceIdentity("consensus", agent=agent), **kw)

    def test_agent(self):
        rec = probe_v5(self.agent_remote("Lighthouse"))
        assert rec.outcome is Outcome.IDENTIFIED and rec.identity.agent == "Lighthouse"

    def test_withheld(self):
        assert probe_v5(self.agent_remote("Teku", expose_agent=False)).outcome is Outcome.NO_AGENT

    def test_unreachable(self):
        assert probe_v5(self.agent_remote("Teku", reachable=False)).outcome is Outcome.UNREACHABLE


class TestCatalog:
    def test_bundled(self):
        cat = load_catalog()
        assert cat[0].key == "ETH Mainnet#9f3d"
        assert label_for(1, cat) == "ETH Mainnet"
        assert label_for(424242, cat) == "Network 424242"

    def test_identify_uses_catalog_label(self):
        cat = load_catalog()
        r = remote(cat[4].tuple)
        r.identity = ServiceIdentity("whatever", tuple=cat[4].tuple)
        assert identify_v4(r, cat).identity == cat[4]

    def test_unknown_tuple(self):
        assert identify_v4(remote(OTHER), load_catalog()).outcome is Outcome.REFUSED_TUPLE

    def test_user_file(self, tmp_path):
        path = tmp_path / "svc.tsv"
        path.write_text("# comment\n7\tTestnet\t66\t" + "11" * 32 + "\tabcdef01\n")
        (ident,) = load_catalog(path)
        assert ident.key == "Testnet#abcd" and ident.tuple.network_id == 7


class TestSweep:
    def build(self):
        rng = random.Random(3)
        cat = load_catalog()
        net = FixtureNetwork()
        snap = Snapshot("s1", 0, 10)
        for i in range(5):
            rec = make_record(random_pk(rng), i + 1)
            net.add(rec, cat[0])
            snap.observations.append(Observation.of(rec, "s1", "v4", 0))
        for i in range(3):
            # behind NAT: nothing answers at the announced endpoint
            rec = make_record(random_pk(rng), 100 + i)
            snap.observations.append(Observation.of(rec, "s1", "v4", 0))
        return snap, net

    def test_identified_and_hidden(self):
        snap, net = self.build()
        out = sweep(snap, net, seed=1)
        counts = {o: sum(r.outcome is o for r in out) for o in Outcome}
        assert counts[Outcome.IDENTIFIED] == 5 and counts[Outcome.UNREACHABLE] == 3

    def test_dedup_and_order(self):
        snap, net = self.build()
        snap.observations += snap.observations[:2]
        out = sweep(snap, net, seed=1)
        assert len(out) == 8
        assert out == sweep(snap, net, seed=1)
        assert [r.dedup_key for r in out] != [r.dedup_key for r in sweep(snap, net, seed=2)]

    def test_key_mismatch_is_unreachable(self):
        snap, net = self.build()
        o = snap.observations[0]
        impostor = Observation(o.snapshot_id, random_pk(random.Random(77)), o.ip, o.udp_port,
                               o.tcp_port, "v4", 0)
        out = sweep(Snapshot("s1", 0, 0, [impostor]), net)
        assert out[0].outcome is Outcome.UNREACHABLE

    def test_empty(self):
        assert sweep(Snapshot("e", 0, 0), FixtureNetwork()) == []


class TestCensus:
    def rec(self, pk, ident):
        outcome = Outcome.IDENTIFIED if ident else Outcome.UNREACHABLE
        return HandshakeRecord("s", pk, "10.0.0.1", 1, "v4", outcome, ident)

    def test_majority_fraction(self):
        rng = random.Random(4)
        a, b = ServiceIdentity("A", tuple=BASE), ServiceIdentity("B", tuple=OTHER)
        records = [self.rec(random_pk(rng), a) for _ in range(51)]
        records += [self.rec(random_pk(rng), b) for _ in range(49)]
        rows = service_census(records)
        assert rows[0].service == "A#9f3d" and rows[0].fraction == pytest.approx(0.51)
        assert sum(r.fraction for r in rows) == pytest.approx(1, abs=1e-9)

    def test_counts_keys_not_records(self):
        rng = random.Random(5)
        a = ServiceIdentity("A", tuple=BASE)
        pk1, pk2 = random_pk(rng), random_pk(rng)
        rows = service_census([self.rec(pk1, a), self.rec(pk1, a), self.rec(pk2, a)])
        assert [(r.service, r.count) for r in rows] == [("A#9f3d", 2)]

    def test_nothing_identified(self):
        assert service_census([self.rec(random_pk(random.Random(0)), None)]) == []

    def test_identified_needs_identity(self):
        with pytest.raises(ValueError):
            HandshakeRecord("s", random_pk(random.Random(0)), "1.1.1.1", 1, "v4", Outcome.IDENTIFIED)
