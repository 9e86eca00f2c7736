import json
import shutil
from pathlib import Path

import pytest

from rapgate.cli import bundled
from rapgate.clock import ManualClock
from rapgate.gateway import Gateway
from rapgate.identity import IdentityStore
from rapgate.monitor import ActivityMonitor
from rapgate.policy import AccessRule, PolicyDatabase, PolicyStore
from rapgate.tokens import KeySet, SigningKey

DATA = Path(__file__).parent / "data"
ADMIN = "test-admin"


def rules(get=("analyst",), post=("admin",)):
    return [AccessRule("GET", tuple(get)), AccessRule("POST", tuple(post))]


def build_gateway(tmp_path: Path | None, clock: ManualClock, keyset: KeySet | None = None, **kw) -> Gateway:
    """X needs username+password, Y also needs location_id. userA is an analyst, userB an admin+analyst."""
    base = tmp_path
    db = PolicyDatabase(base / "policies" if base else None)
    store = PolicyStore(db, clock=clock)
    if "X" not in db:
        store.create_policy("X", rules(), ["username", "password"], "non_sensitive", now=clock.now())
        store.create_policy("Y", rules(post=()), ["username", "password", "location_id"], "sensitive", now=clock.now())
    ids = IdentityStore()
    ids.register("userA", "pw-A", ["analyst"], "GOE-1", "10.0.0.7", iterations=1000)
    ids.register("userB", "pw-B", ["admin", "analyst"], "GOE-2", "10.0.0.8", iterations=1000)
    ids.register("userC", "pw-C", ["analyst"], iterations=1000, registered=False)
    monitor = ActivityMonitor(base / "audit.jsonl" if base else None, clock=clock)
    keyset = keyset or KeySet([SigningKey("k1", b"k" * 32)])
    return Gateway(store, ids, keyset, monitor, clock=clock, admin_key=ADMIN, **kw)


@pytest.fixture
def clock():
    return ManualClock(1_700_000_000.0)


@pytest.fixture
def gateway(clock):
    g = build_gateway(None, clock)
    yield g
    g.close()


@pytest.fixture
def usecase_dir(tmp_path):
    """A writable copy of the bundled use-case fixture."""
    target = tmp_path / "usecase"
    shutil.copytree(bundled(""), target, ignore=shutil.ignore_patterns("audit.jsonl"))
    return target


def load_vectors():
    return json.loads((DATA / "hs256_vectors.json").read_text())["vectors"]


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, text: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
