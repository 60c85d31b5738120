"""Versioned tab-separated record files.

The first line of every file is a JSON header naming the format version,
the record kind and its field list. Each further line is one record, cells
in the declared field order. Every line ends with a newline, so a missing
final newline means the file was cut short.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from typing import Any, Callable, Iterable

from .crawler import Observation
from .handshaker import HandshakeRecord, Outcome, ServiceIdentity, ServiceTuple
from .identity import NodeRecord, PublicKey, decode_enr_url_v4, encode_enr_url_v4
from .integrator import UserProfile
from .simnet import NodeState

FORMAT_VERSION = 1


class StoreError(ValueError):
    pass


class UnknownKind(StoreError):
    pass


class VersionMismatch(StoreError):
    pass


class MalformedLine(StoreError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}: line {lineno}: {reason}")
        self.lineno = lineno


# -- cell codecs ---------------------------------------------------------------

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {v[1]: k for k, v in _ESCAPES.items()}
_INT = re.compile(r"-?\d+")


def _enc_str(v: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in v)


def _dec_str(cell: str) -> str:
    def sub(m):
        ch = m.group(1)
        if ch not in _UNESCAPES:
            raise ValueError(f"bad escape sequence {m.group(0)!r}")
        return _UNESCAPES[ch]
    return re.sub(r"\\(.|$)", sub, cell)


def _dec_int(cell: str) -> int:
    if not _INT.fullmatch(cell):
        raise ValueError(f"not an integer: {cell!r}")
    return int(cell)


def _dec_bool(cell: str) -> bool:
    if cell not in ("true", "false"):
        raise ValueError(f"not a boolean: {cell!r}")
    return cell == "true"


def _dec_pubkey(cell: str) -> PublicKey:
    if cell != cell.lower():
        raise ValueError("hex must be lowercase")
    return PublicKey.from_hex(cell)


def _enc_json(v: Any) -> str:
    return json.dumps(v, sort_keys=True, separators=(",", ":"))


CODECS: dict[str, tuple[Callable[[Any], str], Callable[[str], Any]]] = {
    "str": (_enc_str, _dec_str),
    "int": (str, _dec_int),
    "bool": (lambda v: "true" if v else "false", _dec_bool),
    "pubkey": (lambda v: v.hex(), _dec_pubkey),
    "json": (_enc_json, json.loads),
}


# -- per-kind conversions -------------------------------------------------------

def identity_to_json(ident: ServiceIdentity | None):
    if ident is None:
        return None
    if ident.tuple is not None:
        t = ident.tuple
        return {"label": ident.label, "tuple": [t.protocol_version, t.network_id,
                                                t.genesis_hash.hex(), t.fork_id.hex()]}
    return {"label": ident.label, "agent": ident.agent}


def identity_from_json(obj) -> ServiceIdentity | None:
    if obj is None:
        return None
    if "tuple" in obj:
        pv, nid, gh, fid = obj["tuple"]
        return ServiceIdentity(obj["label"], tuple=ServiceTuple(pv, nid, bytes.fromhex(gh), bytes.fromhex(fid)))
    return ServiceIdentity(obj["label"], agent=obj["agent"])


@dataclass(frozen=True)
class Schema:
    kind: str
    fields: tuple[tuple[str, str], ...]
    to_row: Callable[[Any], dict]
    from_row: Callable[[dict], Any]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    def fingerprint(self) -> str:
        return hashlib.sha256(_enc_json([self.kind, self.fields]).encode()).hexdigest()[:16]


def _obs_row(o: Observation) -> dict:
    return dict(snapshot_id=o.snapshot_id, public_key=o.public_key, ip=o.ip, udp_port=o.udp_port,
                tcp_port=o.tcp_port, protocol=o.protocol, seen_at=o.seen_at)


def _hs_row(h: HandshakeRecord) -> dict:
    return dict(snapshot_id=h.snapshot_id, public_key=h.public_key, ip=h.ip, tcp_port=h.tcp_port,
                protocol=h.protocol, outcome=h.outcome.value, identity=identity_to_json(h.identity),
                at=h.at, steps=list(h.steps))


def _hs_obj(r: dict) -> HandshakeRecord:
    return HandshakeRecord(r["snapshot_id"], r["public_key"], r["ip"], r["tcp_port"], r["protocol"],
                           Outcome(r["outcome"]), identity_from_json(r["identity"]), r["at"],
                           tuple(r["steps"]))


def _profile_row(p: UserProfile) -> dict:
    return dict(
        user_id=p.user_id,
        pubkeys=sorted(p.pubkeys), ips=sorted(p.ips), endpoints=sorted(p.endpoints),
        service_nodes=sorted(map(list, p.service_nodes)),
        geo=sorted(map(list, p.geo)), providers=sorted(map(list, p.providers)),
        hostnames=sorted(p.hostnames), evidence=[list(e) for e in p.evidence],
    )


def _profile_obj(r: dict) -> UserProfile:
    return UserProfile(
        user_id=r["user_id"],
        pubkeys=set(r["pubkeys"]), ips=set(r["ips"]), endpoints=set(r["endpoints"]),
        service_nodes={tuple(x) for x in r["service_nodes"]},
        geo={tuple(x) for x in r["geo"]}, providers={tuple(x) for x in r["providers"]},
        hostnames=set(r["hostnames"]), evidence=[tuple(e) for e in r["evidence"]],
    )


def _state_row(s: NodeState) -> dict:
    rec = s.record
    return dict(
        index=s.index, public_key=rec.public_key, ip=rec.ip, udp_port=rec.udp_port,
        tcp_port=rec.tcp_port, seq=rec.seq, protocol=s.protocol, service=identity_to_json(s.service),
        started=s.started, reachable=s.reachable, expose_agent=s.expose_agent,
        inbound=s.inbound, outbound=s.outbound, max_inbound=s.max_inbound, max_outbound=s.max_outbound,
        table=[[encode_enr_url_v4(t), t.seq] for t in s.table],
    )


def _state_obj(r: dict) -> NodeState:
    table = []
    for url, seq in r["table"]:
        t = decode_enr_url_v4(url)
        table.append(NodeRecord(t.public_key, t.ip, t.udp_port, t.tcp_port, seq))
    return NodeState(
        index=r["index"],
        record=NodeRecord(r["public_key"], r["ip"], r["udp_port"], r["tcp_port"], r["seq"]),
        protocol=r["protocol"], service=identity_from_json(r["service"]), started=r["started"],
        inbound=r["inbound"], outbound=r["outbound"], table=tuple(table),
        reachable=r["reachable"], expose_agent=r["expose_agent"],
        max_inbound=r["max_inbound"], max_outbound=r["max_outbound"],
    )


ENRICHMENT_FIELDS = ("source", "ip_prefix", "country", "region", "city", "isp", "org", "hostname")

SCHEMAS: dict[str, Schema] = {s.kind: s for s in (
    Schema("observation",
           (("snapshot_id", "str"), ("public_key", "pubkey"), ("ip", "str"), ("udp_port", "int"),
            ("tcp_port", "int"), ("protocol", "str"), ("seen_at", "int")),
           _obs_row, lambda r: Observation(**r)),
    Schema("handshake",
           (("snapshot_id", "str"), ("public_key", "pubkey"), ("ip", "str"), ("tcp_port", "int"),
            ("protocol", "str"), ("outcome", "str"), ("identity", "json"), ("at", "int"),
            ("steps", "json")),
           _hs_row, _hs_obj),
    Schema("profile",
           (("user_id", "str"), ("pubkeys", "json"), ("ips", "json"), ("endpoints", "json"),
            ("service_nodes", "json"), ("geo", "json"), ("providers", "json"),
            ("hostnames", "json"), ("evidence", "json")),
           _profile_row, _profile_obj),
    Schema("sim_result",
           (("index", "int"), ("public_key", "pubkey"), ("ip", "str"), ("udp_port", "int"),
            ("tcp_port", "int"), ("seq", "int"), ("protocol", "str"), ("service", "json"),
            ("started", "bool"), ("reachable", "bool"), ("expose_agent", "bool"),
            ("inbound", "int"), ("outbound", "int"), ("max_inbound", "int"),
            ("max_outbound", "int"), ("table", "json")),
           _state_row, _state_obj),
    Schema("enrichment_fixture",
           tuple((name, "str") for name in ENRICHMENT_FIELDS),
           dict, dict),
)}


def schema(kind: str) -> Schema:
    try:
        return SCHEMAS[kind]
    except KeyError:
        raise UnknownKind(f"unknown record kind {kind!r}; known: {', '.join(SCHEMAS)}") from None


def _header(s: Schema, created_at: int) -> str:
    return _enc_json({"format_version": FORMAT_VERSION, "record_kind": s.kind,
                      "created_at": created_at, "fields": s.names}) + "\n"


def _encode(s: Schema, rec) -> str:
    row = s.to_row(rec)
    return "\t".join(CODECS[t][0](row[name]) for name, t in s.fields) + "\n"


def write(kind: str, records: Iterable, path, created_at: int = 0) -> int:
    s = schema(kind)
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_header(s, created_at))
        for rec in records:
            fh.write(_encode(s, rec))
            n += 1
    return n


def append(kind: str, records: Iterable, path, created_at: int = 0) -> int:
    """Add records to an existing file of the same kind, creating it if needed."""
    s = schema(kind)
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return write(kind, records, path, created_at)
    with open(path, encoding="utf-8", newline="") as fh:
        _check_header(fh.readline(), s, path)
    n = 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        for rec in records:
            fh.write(_encode(s, rec))
            n += 1
    return n


def read_header(path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        line = fh.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(path, 1, f"header is not JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedLine(path, 1, "header is not an object")
    return header


def _check_header(line: str, s: Schema, path) -> dict:
    if not line.endswith("\n"):
        raise MalformedLine(path, 1, "truncated header line")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(path, 1, f"header is not JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedLine(path, 1, "header is not an object")
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format_version {header.get('format_version')!r}, "
                              f"this reader understands {FORMAT_VERSION}")
    if header.get("record_kind") != s.kind:
        raise StoreError(f"{path}: holds {header.get('record_kind')!r} records, expected {s.kind!r}")
    if header.get("fields") != s.names:
        raise MalformedLine(path, 1, f"field list {header.get('fields')!r} does not match schema")
    return header


def read(kind: str, path) -> list:
    s = schema(kind)
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first:
            raise MalformedLine(path, 1, "empty file, header missing")
        _check_header(first, s, path)
        for lineno, line in enumerate(fh, start=2):
            if not line.endswith("\n"):
                raise MalformedLine(path, lineno, "truncated line (no trailing newline)")
            cells = line[:-1].split("\t")
            if len(cells) != len(s.fields):
                raise MalformedLine(path, lineno, f"expected {len(s.fields)} fields, got {len(cells)}")
            try:
                row = {name: CODECS[t][1](cell) for (name, t), cell in zip(s.fields, cells)}
                out.append(s.from_row(row))
            except (ValueError, TypeError, KeyError) as exc:
                raise MalformedLine(path, lineno, str(exc)) from None
    return out
