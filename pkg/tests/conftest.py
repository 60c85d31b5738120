import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from keyreuse.identity import NodeRecord, PublicKey  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


def random_pk(rng: random.Random) -> PublicKey:
    # any 64 bytes serve as a key for table logic; curve validity is not checked there
    return PublicKey(rng.randbytes(64))


def make_record(pk, i: int = 1, port: int = 30303) -> NodeRecord:
    return NodeRecord(pk, f"10.{(i >> 16) & 255}.{(i >> 8) & 255}.{i & 255}", port, port)


@pytest.fixture
def rng():
    return random.Random(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    RESULTS = module.RESULTS
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, line = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {line}")
