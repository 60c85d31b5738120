"""
How much of a routing table does a crawler see?
===============================================

A v4 crawler can only ask for the 16 records closest to a target it picks,
so it samples tables. A v5 crawler asks by distance and gets whole buckets.
"""

import statistics

from keyreuse.crawler import crawl_v4, crawl_v5, expected_fraction, recovered_fractions, summarize
from keyreuse.discovery import endpoint
from keyreuse.simnet import StaticNetwork, mesh_config, run

# the estimate for a full 272-slot table
for q in (10, 20, 40, 80):
    print(f"{q:>3} queries -> {expected_fraction(q):.2%} of a full table")

# a converged 200-node network; tables hold far fewer than 272 records here
res = run(mesh_config(200, seed=3))
truth = {endpoint(s.record): s.table for s in res.nodes}
print("mean table size:", statistics.mean(len(t) for t in truth.values()))

net = StaticNetwork(res.nodes)
for q in (5, 10, 40):
    snap = crawl_v4(net, q, seed=1)
    print(f"v4, {q:>2} queries/node: mean recovered {statistics.mean(recovered_fractions(snap, truth)):.3f}")

snap = crawl_v5(net)
print(f"v5, 17 distances:     mean recovered {statistics.mean(recovered_fractions(snap, truth)):.3f}")

s = summarize([snap])
print(f"distinct keys {s.distinct_by_key}, distinct ips {s.distinct_by_ip}, observations {s.total_with_duplicates}")
