import random

import pytest
from hypothesis import given, strategies as st

from conftest import make_record, random_pk
from oracles import expected_distinct_exact

from keyreuse.crawler import (
    CrawlError,
    Observation,
    Snapshot,
    crawl_v4,
    crawl_v5,
    expected_distinct,
    expected_fraction,
    recovered_fractions,
    snapshot_from_observations,
    summarize,
)
from keyreuse.discovery import MINUTE, endpoint
from keyreuse.simnet import StaticNetwork, mesh_config, run


@pytest.fixture(scope="module")
def converged():
    res = run(mesh_config(80, 5, duration=10 * MINUTE))
    return res, StaticNetwork(res.nodes)


class TestEstimate:
    def test_forty_queries(self):
        # frozen from the exact rational oracle
        assert expected_distinct(40) == pytest.approx(247.93358756243964, abs=1e-9)
        assert expected_fraction(40) == pytest.approx(0.9115205425089692, abs=1e-12)

    def test_small_values(self):
        assert expected_distinct(0) == 0
        assert expected_distinct(1) == pytest.approx(16)

    @given(st.integers(0, 400))
    def test_matches_oracle_and_bounds(self, n):
        assert expected_distinct(n) == pytest.approx(float(expected_distinct_exact(n)), rel=1e-12, abs=1e-12)
        assert expected_distinct(n) <= expected_distinct(n + 1) <= 272

    def test_negative(self):
        with pytest.raises(ValueError):
            expected_distinct(-1)


class TestCrawl:
    def test_zero_queries_only_bootstrap(self, converged):
        res, net = converged
        snap = crawl_v4(net, 0, seed=1)
        assert [o.public_key for o in snap.observations] == [r.public_key for r in net.bootstrap()]

    def test_same_seed_same_snapshot(self, converged):
        _, net = converged
        assert crawl_v4(net, 10, seed=4) == crawl_v4(net, 10, seed=4)

    def test_query_cap_per_node(self, converged):
        _, net = converged
        snap = crawl_v4(net, 7, seed=2)
        assert max(snap.queries_sent.values()) <= 7
        snap = crawl_v5(net, seed=2)
        assert max(snap.queries_sent.values()) <= 17

    def test_reaches_every_node(self, converged):
        res, net = converged
        snap = crawl_v4(net, 20, seed=3)
        assert {o.public_key for o in snap.observations} == {s.record.public_key for s in res.nodes}
        assert all(o.snapshot_id == snap.snapshot_id and o.protocol == "v4" for o in snap.observations)

    def test_v5_recovers_tables_exactly(self, converged):
        res, net = converged
        snap = crawl_v5(net, seed=0)
        for s in res.nodes:
            got = snap.neighbor_sets[endpoint(s.record)]
            assert got == set(s.table)
            assert len(got) <= 272

    def test_v5_empty_table_yields_nothing(self):
        rng = random.Random(0)
        lone = make_record(random_pk(rng), 1)

        class One:
            def bootstrap(self):
                return [lone]

            def find_node_v5(self, record, distance):
                return []

            def find_node_v4(self, record, target):
                return []

        snap = crawl_v5(One())
        assert snap.neighbor_sets[endpoint(lone)] == set()
        assert len(snap.observations) == 1

    def test_v4_fraction_reported(self, converged):
        res, net = converged
        snap = crawl_v4(net, 40, seed=0)
        fr = recovered_fractions(snap, {endpoint(s.record): s.table for s in res.nodes})
        assert len(fr) == len(res.nodes)
        assert all(0 < f <= 1 for f in fr)

    def test_needs_bootstrap(self):
        class Empty:
            def bootstrap(self):
                return []

        with pytest.raises(CrawlError):
            crawl_v4(Empty(), 5)
        with pytest.raises(CrawlError):
            crawl_v5(Empty())

    def test_dead_nodes_not_queried_further(self, converged):
        res, _ = converged
        dead = res.nodes[1].record
        states = [s for s in res.nodes if s.index != 1]
        net = StaticNetwork(states)
        snap = crawl_v4(net, 5, seed=0)
        key = endpoint(dead)
        if key in snap.queries_sent:
            assert snap.queries_sent[key] == 1
            assert key not in snap.neighbor_sets


def obs(pk, ip, sid="s", t=0):
    return Observation(sid, pk, ip, 30303, 30303, "v4", t)


class TestSummarize:
    def test_nat(self):
        rng = random.Random(0)
        snap = Snapshot("s", 0, 0, [obs(random_pk(rng), "10.0.0.1") for _ in range(3)])
        s = summarize([snap])
        assert (s.distinct_by_key, s.distinct_by_ip, s.total_with_duplicates) == (3, 1, 3)

    def test_empty(self):
        s = summarize([])
        assert (s.distinct_by_key, s.distinct_by_ip, s.total_with_duplicates) == (0, 0, 0)

    def test_ten_snapshots_recount(self):
        rng = random.Random(8)
        keys = [random_pk(rng) for _ in range(30)]
        ips = [f"10.1.0.{i}" for i in range(1, 13)]
        snaps = []
        for n in range(10):
            snaps.append(Snapshot(f"s{n}", n, n, [obs(rng.choice(keys), rng.choice(ips), f"s{n}", n)
                                                  for _ in range(rng.randint(0, 40))]))
        flat = [o for s in snaps for o in s.observations]
        s = summarize(snaps)
        assert s.total_with_duplicates == len(flat)
        assert s.distinct_by_key == len({o.public_key for o in flat})
        assert s.distinct_by_ip == len({o.ip for o in flat})
        assert s.distinct_by_key >= s.distinct_by_ip

    def test_regroup(self):
        rng = random.Random(1)
        a, b = random_pk(rng), random_pk(rng)
        items = [obs(a, "10.0.0.1", "x", 5), obs(b, "10.0.0.2", "y", 9), obs(b, "10.0.0.2", "x", 7)]
        snaps = snapshot_from_observations(items)
        assert [(s.snapshot_id, len(s.observations), s.started_at, s.ended_at) for s in snaps] == [
            ("x", 2, 5, 7), ("y", 1, 9, 9)]
