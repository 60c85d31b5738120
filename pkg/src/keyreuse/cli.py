"""Command-line entry point.

Exit codes: 0 on success, 1 on a domain error (bad input file, failed
crawl), 2 on a usage error. Every command takes ``--seed`` (default 0);
nothing reads the wall clock or the environment.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import crawler, fixtures, handshaker, integrator, simnet, store

DEFAULT_SEED = 0


class CliError(Exception):
    pass


# -- output -----------------------------------------------------------------

def emit(rows: list[dict], columns: list[str], fmt: str, out=None) -> None:
    """Print rows as an aligned table or as one JSON object per line."""
    out = out or sys.stdout
    if fmt == "records":
        for row in rows:
            out.write(json.dumps({c: row[c] for c in columns}, sort_keys=False) + "\n")
        return
    cells = [[str(row[c]) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    out.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")
    for r in cells:
        out.write("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() + "\n")


def _add_common(p: argparse.ArgumentParser, fmt: bool = True) -> None:
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for all randomness (default 0)")
    if fmt:
        p.add_argument("--format", choices=("table", "records"), default="table")


# -- sim ----------------------------------------------------------------------

def cmd_sim_exp1(args) -> None:
    res = simnet.scenario_exp1(args.protocol, args.nodes, args.seed, shared_key=not args.unique_keys)
    row = dict(protocol=res.protocol, nodes=res.nodes, services=res.services,
               public_keys=res.public_keys, wcc_count=res.wcc_count, max_wcc=res.max_wcc)
    emit([row], list(row), args.format)
    if args.out:
        store.write("sim_result", res.result.nodes, args.out)


def cmd_sim_exp2(args) -> None:
    res = simnet.scenario_exp2(args.seed, args.protocol, shared_key=not args.unique_keys)
    rows = [dict(protocol=res.protocol, node="node1", inbound=res.node1[0], outbound=res.node1[1]),
            dict(protocol=res.protocol, node="node2", inbound=res.node2[0], outbound=res.node2[1])]
    emit(rows, list(rows[0]), args.format)
    if args.out:
        store.write("sim_result", res.result.nodes, args.out)


def cmd_sim_network(args) -> None:
    catalog = handshaker.load_catalog()
    if args.protocol == "v5":
        services = [handshaker.ServiceIdentity("consensus", agent=a) for a in fixtures.AGENTS]
    else:
        services = catalog
    cfg = simnet.mesh_config(args.nodes, args.seed, args.protocol, args.minutes * simnet.MINUTE, services)
    res = simnet.run(cfg)
    n = store.write("sim_result", res.nodes, args.out)
    comps = res.graph.components()
    emit([dict(nodes=n, edges=len(res.graph.edges), wcc_count=len(comps),
               max_wcc=max(map(len, comps), default=0))],
         ["nodes", "edges", "wcc_count", "max_wcc"], args.format)


# -- crawl / handshake -----------------------------------------------------------

def _static(path) -> simnet.StaticNetwork:
    return simnet.StaticNetwork(store.read("sim_result", path))


def cmd_crawl(args) -> None:
    net = _static(args.state)
    if args.protocol == "v4":
        snap = crawler.crawl_v4(net, args.queries, args.seed, started_at=args.start)
    else:
        snap = crawler.crawl_v5(net, args.seed, started_at=args.start)
    store.write("observation", snap.observations, args.out)
    s = crawler.summarize([snap])
    emit([dict(snapshot_id=snap.snapshot_id, observations=s.total_with_duplicates,
               distinct_by_key=s.distinct_by_key, distinct_by_ip=s.distinct_by_ip)],
         ["snapshot_id", "observations", "distinct_by_key", "distinct_by_ip"], args.format)


def cmd_handshake(args) -> None:
    net = _static(args.state)
    records = []
    for path in args.snapshot:
        for snap in crawler.snapshot_from_observations(store.read("observation", path)):
            records += handshaker.sweep(snap, net, args.seed)
    store.write("handshake", records, args.out)
    counts = {o.value: 0 for o in handshaker.Outcome}
    for r in records:
        counts[r.outcome.value] += 1
    emit([dict(outcome=k, count=v) for k, v in counts.items()], ["outcome", "count"], args.format)


# -- integrate / report -----------------------------------------------------------

PROFILES = "profiles.tsv"
REDACTED = "profiles.redacted.tsv"


def cmd_integrate(args) -> None:
    observations = [o for p in args.snapshots for o in store.read("observation", p)]
    records = [h for p in args.handshakes for h in store.read("handshake", p)]
    providers = integrator.providers_from_rows(store.read("enrichment_fixture", args.enrich)) if args.enrich else []
    graph = integrator.build_graph(observations, integrator.services_from_handshakes(records), providers)
    profiles = integrator.detect_reuse(graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.write("profile", profiles, out / PROFILES)
    salt = args.salt if args.salt is not None else f"keyreuse/{args.seed}"
    store.write("profile", [integrator.redact(p, salt) for p in profiles], out / REDACTED)
    stats = integrator.user_stats(profiles)
    emit([dict(vertices=len(graph.vertices), edges=len(graph.edges),
               components=len(integrator.weakly_connected_components(graph)),
               users=stats.users, service_nodes=stats.service_nodes, provider_errors=len(graph.errors))],
         ["vertices", "edges", "components", "users", "service_nodes", "provider_errors"], args.format)


def _profiles(directory) -> list[integrator.UserProfile]:
    return store.read("profile", Path(directory) / PROFILES)


def cmd_report_stats(args) -> None:
    stats = integrator.user_stats(_profiles(args.profiles))
    rows = [dict(metric="users", value=stats.users),
            dict(metric="service_nodes", value=stats.service_nodes),
            dict(metric="share_3_to_5_services", value=round(stats.share_with_services(3, 5), 4)),
            dict(metric="single_ip_users", value=stats.ip_histogram.get(1, 0)),
            dict(metric="max_services", value=max(stats.services_histogram, default=0)),
            dict(metric="max_ips", value=max(stats.ip_histogram, default=0))]
    rows += [dict(metric=f"services={k}", value=v) for k, v in stats.services_histogram.items()]
    rows += [dict(metric=f"ips={k}", value=v) for k, v in stats.ip_histogram.items()]
    emit(rows, ["metric", "value"], args.format)


def profile_rows(p: integrator.UserProfile) -> list[dict]:
    """Adjacency listing of one profile: the key, then each ip with what hangs off it."""
    rows = [dict(kind="pubkey", value=pk, via=p.user_id) for pk in sorted(p.pubkeys)]
    for ip in sorted(p.ips):
        rows.append(dict(kind="ip", value=ip, via="pubkey"))
        for ep, svc in sorted(p.service_nodes):
            if ep.rsplit(":", 1)[0] == ip:
                rows.append(dict(kind="service", value=svc, via=ep))
    for country, region, city in sorted(p.geo):
        rows += [dict(kind="country", value=country, via="ip"),
                 dict(kind="region", value=region, via="ip"),
                 dict(kind="city", value=city, via="ip")]
    for isp, org in sorted(p.providers):
        rows += [dict(kind="isp", value=isp, via="ip"), dict(kind="org", value=org, via="ip")]
    rows += [dict(kind="hostname", value=h, via="ip") for h in sorted(p.hostnames)]
    return rows


def cmd_report_profile(args) -> None:
    match = [p for p in _profiles(args.profiles) if p.user_id == args.user]
    if not match:
        raise CliError(f"no profile {args.user!r} in {args.profiles}")
    emit(profile_rows(match[0]), ["kind", "value", "via"], args.format)


def cmd_report_census(args) -> None:
    records = [h for p in args.handshakes for h in store.read("handshake", p)]
    rows = [dict(service=r.service, count=r.count, fraction=round(r.fraction, 4))
            for r in handshaker.service_census(records)]
    emit(rows, ["service", "count", "fraction"], args.format)


def cmd_estimate_coverage(args) -> None:
    e = crawler.expected_distinct(args.queries)
    row = dict(queries=args.queries, expected_distinct=round(e, 2),
               fraction=round(e / crawler.TABLE_CAPACITY, 4))
    emit([row], list(row), args.format)
    if args.format == "table":
        print(f"{e:.2f} / {100 * e / crawler.TABLE_CAPACITY:.2f}%")


def cmd_collision_risk(args) -> None:
    row = dict(nonce_bits=args.bits, sessions=args.sessions,
               approx=integrator.collision_risk(args.bits, args.sessions))
    if args.exact:
        row["exact"] = integrator.collision_risk(args.bits, args.sessions, exact=True)
    emit([row], list(row), args.format)


def cmd_fixture(args) -> None:
    corpus = fixtures.headline_corpus(args.seed) if args.name == "headline" else fixtures.profile_corpus(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = [h for s in corpus.snapshots for h in handshaker.sweep(s, corpus.network, args.seed)]
    n_obs = store.write("observation", corpus.observations, out / "observations.tsv")
    n_hs = store.write("handshake", records, out / "handshakes.tsv")
    n_en = store.write("enrichment_fixture", corpus.enrichment, out / "enrichment.tsv")
    emit([dict(file="observations.tsv", records=n_obs), dict(file="handshakes.tsv", records=n_hs),
          dict(file="enrichment.tsv", records=n_en)], ["file", "records"], args.format)


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keyreuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run simulated networks").add_subparsers(dest="scenario", required=True)
    p = sim.add_parser("exp1", help="all nodes under one key; DHT components")
    p.add_argument("--protocol", choices=("v4", "v5"), default="v4")
    p.add_argument("--nodes", type=int, default=10)
    p.add_argument("--unique-keys", action="store_true", help="control run with a key per node")
    p.add_argument("--out", help="write final node states here")
    _add_common(p)
    p.set_defaults(func=cmd_sim_exp1)

    p = sim.add_parser("exp2", help="second node joins under a reused key; connection counts")
    p.add_argument("--protocol", choices=("v4", "v5"), default="v4")
    p.add_argument("--unique-keys", action="store_true", help="control run with distinct keys")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_sim_exp2)

    p = sim.add_parser("network", help="converge a unique-key network and save its state")
    p.add_argument("--protocol", choices=("v4", "v5"), default="v4")
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--minutes", type=int, default=20)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_sim_network)

    p = sub.add_parser("crawl", help="snapshot a saved network")
    p.add_argument("--state", required=True)
    p.add_argument("--protocol", choices=("v4", "v5"), default="v4")
    p.add_argument("--queries", type=int, default=40)
    p.add_argument("--start", type=int, default=0, help="logical start time of the snapshot")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_crawl)

    p = sub.add_parser("handshake", help="identify services behind a snapshot's endpoints")
    p.add_argument("--snapshot", required=True, nargs="+")
    p.add_argument("--state", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_handshake)

    p = sub.add_parser("integrate", help="build the identity graph and flag reused keys")
    p.add_argument("--snapshots", required=True, nargs="+")
    p.add_argument("--handshakes", required=True, nargs="+")
    p.add_argument("--enrich")
    p.add_argument("--salt", help="salt for the redacted profile file")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_integrate)

    report = sub.add_parser("report", help="summaries of integrated profiles").add_subparsers(
        dest="report", required=True)
    p = report.add_parser("stats")
    p.add_argument("--profiles", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_report_stats)
    p = report.add_parser("profile")
    p.add_argument("--user", required=True)
    p.add_argument("--profiles", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_report_profile)
    p = report.add_parser("census")
    p.add_argument("--handshakes", required=True, nargs="+")
    _add_common(p)
    p.set_defaults(func=cmd_report_census)

    p = sub.add_parser("estimate-coverage", help="expected share of a table seen after N random queries")
    p.add_argument("--queries", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_estimate_coverage)

    p = sub.add_parser("collision-risk", help="nonce collision probability")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--exact", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_collision_risk)

    p = sub.add_parser("fixture", help="write a synthetic corpus (observations, handshakes, enrichment)")
    p.add_argument("name", choices=("headline", "profile"))
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        args.func(args)
    except (CliError, store.StoreError, crawler.CrawlError, simnet.SimConfigError,
            ValueError, OSError) as exc:
        print(f"keyreuse: error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.flush()
    return 0


def run_cli(argv: list[str]) -> int:
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2


if __name__ == "__main__":
    raise SystemExit(main())
