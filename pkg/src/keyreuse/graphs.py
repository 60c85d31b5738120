from __future__ import annotations

from collections import defaultdict
from typing import Hashable, Iterable


def components(vertices: Iterable[Hashable], edges: Iterable[tuple[Hashable, Hashable]]) -> list[set]:
    """Weakly connected components; edge direction is ignored.

    Components come back largest first, ties in first-seen vertex order.
    """
    adj = defaultdict(list)
    order = list(dict.fromkeys(vertices))
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    known = set(order)
    for v in adj:
        if v not in known:
            order.append(v)
            known.add(v)
    seen = set()
    out = []
    for start in order:
        if start in seen:
            continue
        comp = {start}
        stack = [start]
        seen.add(start)
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    comp.add(w)
                    stack.append(w)
        out.append(comp)
    out.sort(key=len, reverse=True)
    return out
