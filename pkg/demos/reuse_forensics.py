"""
From crawl snapshots to operator profiles
=========================================

Observations and handshake results become an identity graph. Keys that
front two or more service nodes mark a single operator, and enrichment
places that operator's machines.
"""

from keyreuse.crawler import summarize
from keyreuse.fixtures import headline_corpus, profile_corpus
from keyreuse.handshaker import service_census, sweep
from keyreuse.integrator import (
    build_graph,
    detect_reuse,
    providers_from_rows,
    redact,
    services_from_handshakes,
    user_stats,
)

corpus = headline_corpus(seed=0)
s = summarize(corpus.snapshots)
print(f"{s.total_with_duplicates} observations, {s.distinct_by_key} keys, {s.distinct_by_ip} ips")

# identify the service behind every endpoint we saw
records = [r for snap in corpus.snapshots for r in sweep(snap, corpus.network, seed=0)]
for row in service_census(records)[:3]:
    print(f"  {row.service:<24} {row.count:>4} keys  {row.fraction:.1%}")

graph = build_graph(corpus.observations, services_from_handshakes(records))
profiles = detect_reuse(graph)
stats = user_stats(profiles)
print(f"{stats.users} reusing operators behind {stats.service_nodes} service nodes")
print(f"{stats.share_with_services(3, 5):.0%} run 3 to 5 services; {stats.ip_histogram[1]} use a single ip")
top = max(stats.per_user_rows, key=lambda r: r.services)
print(f"largest: {top.user_id} with {top.services} services on {top.ips} ips")

# one operator, with geo and reverse-lookup fixtures attached to its ips
small = profile_corpus()
recs = [r for snap in small.snapshots for r in sweep(snap, small.network)]
g = build_graph(small.observations, services_from_handshakes(recs), providers_from_rows(small.enrichment))
(p,) = detect_reuse(g)
print(p.user_id, sorted(p.ips), sorted(p.services), p.geo, p.providers, sorted(p.hostnames), sep="\n  ")

# what gets shared outside: salted hashes instead of addresses and keys
print(sorted(redact(p, "demo-salt").ips))
