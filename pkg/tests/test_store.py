import os
import random
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pk

from keyreuse import store
from keyreuse.crawler import Observation
from keyreuse.discovery import MINUTE
from keyreuse.fixtures import profile_corpus
from keyreuse.handshaker import HandshakeRecord, Outcome, ServiceIdentity, load_catalog, sweep
from keyreuse.integrator import build_graph, detect_reuse, providers_from_rows, services_from_handshakes
from keyreuse.simnet import mesh_config, run

GOLDEN = Path(__file__).parent / "golden"
# regenerate with KEYREUSE_REGEN_GOLDEN=1 only when the format version changes
REGEN = os.environ.get("KEYREUSE_REGEN_GOLDEN") == "1"

FINGERPRINTS = {
    "observation": "622dc4553005c38c",
    "handshake": "6445dd34f75a0463",
    "profile": "8024ee515469686c",
    "sim_result": "03eac41dfe46affc",
    "enrichment_fixture": "5d8ef3da59bc5010",
}


def samples(kind):
    corpus = profile_corpus(seed=3)
    if kind == "observation":
        obs = corpus.observations
        tricky = obs[0]
        # a snapshot label exercising every escape
        return obs + [Observation("a\tb\\c\nd\re", tricky.public_key, tricky.ip, 1, 2, "v5", -5)]
    if kind == "handshake":
        recs = [r for s in corpus.snapshots for r in sweep(s, corpus.network, seed=1)]
        pk = random_pk(random.Random(0))
        recs.append(HandshakeRecord("x", pk, "10.0.0.1", 9000, "v5", Outcome.IDENTIFIED,
                                    ServiceIdentity("consensus", agent="Lighthouse"), 7, ("tcp",)))
        recs.append(HandshakeRecord("x", pk, "10.0.0.2", 9000, "v5", Outcome.NO_AGENT))
        return recs
    if kind == "profile":
        recs = [r for s in corpus.snapshots for r in sweep(s, corpus.network)]
        g = build_graph(corpus.observations, services_from_handshakes(recs),
                        providers_from_rows(corpus.enrichment))
        return detect_reuse(g)
    if kind == "sim_result":
        return run(mesh_config(6, 2, duration=4 * MINUTE, services=load_catalog()[:2])).nodes
    if kind == "enrichment_fixture":
        return corpus.enrichment
    raise AssertionError(kind)


KINDS = sorted(FINGERPRINTS)


@pytest.mark.parametrize("kind", KINDS)
def test_round_trip(kind, tmp_path):
    recs = samples(kind)
    path = tmp_path / "f.tsv"
    assert store.write(kind, recs, path, created_at=17) == len(recs)
    assert store.read(kind, path) == list(recs)
    assert store.read_header(path)["created_at"] == 17


@pytest.mark.parametrize("kind", KINDS)
def test_golden(kind, tmp_path):
    golden = GOLDEN / f"{kind}.v{store.FORMAT_VERSION}.tsv"
    if REGEN:
        store.write(kind, samples(kind), golden)
    path = tmp_path / "f.tsv"
    store.write(kind, samples(kind), path)
    assert path.read_bytes() == golden.read_bytes()
    assert store.read(kind, golden) == list(samples(kind))


@pytest.mark.parametrize("kind", KINDS)
def test_schema_fingerprints_pinned(kind):
    # a change here means FORMAT_VERSION must go up and goldens be regenerated
    assert store.schema(kind).fingerprint() == FINGERPRINTS[kind]


def test_empty_record_list(tmp_path):
    path = tmp_path / "e.tsv"
    store.write("observation", [], path)
    assert store.read("observation", path) == []


def test_empty_file(tmp_path):
    path = tmp_path / "e.tsv"
    path.write_text("")
    with pytest.raises(store.MalformedLine) as err:
        store.read("observation", path)
    assert err.value.lineno == 1


def test_truncated_line_named(tmp_path):
    path = tmp_path / "t.tsv"
    recs = samples("observation")
    store.write("observation", recs[:4], path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(store.MalformedLine) as err:
        store.read("observation", path)
    assert err.value.lineno == 5 and "line 5" in str(err.value)


def test_bad_cell_named(tmp_path):
    path = tmp_path / "b.tsv"
    store.write("observation", samples("observation")[:3], path)
    lines = path.read_text().split("\n")
    cells = lines[2].split("\t")
    cells[3] = "thirty"
    lines[2] = "\t".join(cells)
    path.write_text("\n".join(lines))
    with pytest.raises(store.MalformedLine) as err:
        store.read("observation", path)
    assert err.value.lineno == 3


def test_wrong_field_count(tmp_path):
    path = tmp_path / "c.tsv"
    store.write("observation", samples("observation")[:1], path)
    path.write_text(path.read_text().replace("\tv4\t", "\t"))
    with pytest.raises(store.MalformedLine):
        store.read("observation", path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "v.tsv"
    store.write("observation", [], path)
    path.write_text(path.read_text().replace('"format_version":1', '"format_version":2'))
    with pytest.raises(store.VersionMismatch):
        store.read("observation", path)


def test_unknown_kind(tmp_path):
    with pytest.raises(store.UnknownKind):
        store.write("weather", [], tmp_path / "w.tsv")
    with pytest.raises(store.UnknownKind):
        store.read("weather", tmp_path / "w.tsv")


def test_kind_mismatch(tmp_path):
    path = tmp_path / "k.tsv"
    store.write("observation", [], path)
    with pytest.raises(store.StoreError):
        store.read("handshake", path)


def test_append(tmp_path):
    path = tmp_path / "a.tsv"
    recs = samples("observation")
    store.append("observation", recs[:2], path)
    store.append("observation", recs[2:], path)
    assert store.read("observation", path) == recs
    with pytest.raises(store.StoreError):
        store.append("handshake", [], path)


@settings(max_examples=200)
@given(st.text())
def test_string_codec(s):
    enc, dec = store.CODECS["str"]
    cell = enc(s)
    assert "\t" not in cell and "\n" not in cell
    assert dec(cell) == s


@pytest.mark.parametrize("cell", ["\\", "a\\q", "\\x"])
def test_bad_escapes(cell):
    with pytest.raises(ValueError):
        store.CODECS["str"][1](cell)


def test_uppercase_pubkey_rejected():
    pk = random_pk(random.Random(1))
    with pytest.raises(ValueError):
        store.CODECS["pubkey"][1](pk.hex().upper())
