"""
Two simulated networks where operators reuse one discovery key
===============================================================

First every node runs under the same key, and the DHT never forms: each
node drops the others as copies of itself. Then a second service joins a
live network under the key of an existing node and finds no way in.
"""

from keyreuse.simnet import scenario_exp1, scenario_exp2

# all nodes share one key; each ends up alone in its own component
for protocol in ("v4", "v5"):
    for n in (10, 100):
        r = scenario_exp1(protocol, n, seed=1)
        print(f"{protocol} n={n:<4} keys={r.public_keys} components={r.wcc_count} largest={r.max_wcc}")

# the same setup with a key per node converges to one component
r = scenario_exp1("v4", 100, seed=1, shared_key=False)
print(f"unique keys: components={r.wcc_count} largest={r.max_wcc}")

# node 2 joins an hour in under node 1's key, running a different service;
# peers that already bonded with node 1 never learn node 2's endpoint
res = scenario_exp2(seed=1, protocol="v4")
print("shared key   node1 (in, out) =", res.node1, " node2 (in, out) =", res.node2)

ctl = scenario_exp2(seed=1, protocol="v4", shared_key=False)
print("control      node1 (in, out) =", ctl.node1, " node2 (in, out) =", ctl.node2)
