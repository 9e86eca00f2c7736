import json
import random
import threading

import pytest

from conftest import rules
from rapgate.policy import (
    AccessRule,
    MalformedPolicy,
    PolicyDatabase,
    PolicyStore,
    ResourceAccessPolicy,
    UnknownResource,
    UnknownVersion,
    normalize_credentials,
    parse_rules,
)


def store_with(n=5, db=None):
    store = PolicyStore(db or PolicyDatabase())
    for k in range(n):
        store.create_policy(f"R{k}", rules(), now=100.0)
    return store


def test_cache_serves_repeat_reads():
    store = store_with(5)
    db = store.db
    start = db.reads
    rng = random.Random(1)
    for _ in range(1000):
        store.get_policy(f"R{rng.randrange(5)}")
    assert db.reads - start == 5
    assert store.misses == 5 and store.hits == 995


def test_update_evicts_and_bumps_version():
    store = store_with(1)
    seen = []
    store.subscribe(seen.append)
    assert store.get_policy("R0").rap_Tno == 0
    new = store.update_policy("R0", rules(get=("x",)), ["username", "password", "ip_address"], now=200.0)
    assert new.rap_Tno == 1 and new.rap_iat == 200.0
    assert store.cached("R0") is None
    assert seen == [new]
    got = store.get_policy("R0")
    assert got == new and got.required_credentials == ("ip_address", "password", "username")


def test_rap_iat_never_goes_backwards():
    store = store_with(1)
    assert store.update_policy("R0", rules(), [], now=50.0).rap_iat == 100.0


def test_archive_keeps_superseded_versions():
    store = store_with(1)
    for i in range(3):
        store.update_policy("R0", rules(get=(f"r{i}",)), [], now=200.0 + i)
    assert [e.policy.rap_Tno for e in store.archive("R0")] == [0, 1, 2]
    assert store.get_archived("R0", 1).rules[0].allowed_roles == ("r0",)
    with pytest.raises(UnknownVersion):
        store.get_archived("R0", 3)


def test_unknown_resource():
    store = store_with(1)
    with pytest.raises(UnknownResource):
        store.get_policy("nope")
    with pytest.raises(UnknownResource):
        store.update_policy("nope", rules(), [], now=1.0)


def test_duplicate_create_refused():
    store = store_with(1)
    with pytest.raises(MalformedPolicy):
        store.create_policy("R0", rules())


def test_ttl_expires_cache_entries():
    class C:
        t = 0.0

        def now(self):
            return self.t

    clock = C()
    store = PolicyStore(ttl=10.0, clock=clock)
    store.create_policy("R", rules())
    store.get_policy("R")
    store.get_policy("R")
    clock.t = 10.0
    store.get_policy("R")
    assert (store.hits, store.misses) == (1, 2)


@pytest.mark.parametrize(
    "doc",
    [
        "x",
        {"rules": [{"action": "DELETE"}]},
        {"rules": [{"action": "GET", "allowed_roles": "admin"}]},
        {"rules": [{"action": "GET", "allow": "yes"}]},
        {"rules": [{"action": "GET"}, {"action": "GET"}]},
    ],
)
def test_malformed_rules(doc):
    with pytest.raises(MalformedPolicy):
        parse_rules(doc["rules"] if isinstance(doc, dict) else doc)


def test_policy_document_validation():
    ok = {"resource_id": "X", "rules": [{"action": "GET", "allowed_roles": ["a"]}]}
    assert ResourceAccessPolicy.from_document(ok).required_credentials == ("password", "username")
    for bad in (
        {**ok, "resource_id": "../etc"},
        {**ok, "sensitivity": "secret"},
        {**ok, "rap_Tno": -1},
        {**ok, "required_credentials": ["fingerprint"]},
        {**ok, "required_credentials": "username"},
        {"rules": []},
    ):
        with pytest.raises(MalformedPolicy):
            ResourceAccessPolicy.from_document(bad)


def test_normalize_credentials_adds_base_fields():
    assert normalize_credentials(["ip_address"]) == ("ip_address", "password", "username")


def test_permitted_actions():
    p = ResourceAccessPolicy("X", 0, 0.0, "non_sensitive", (), (AccessRule("GET", ("a",)), AccessRule("POST", ("a",), allow=False)))
    assert p.permitted_actions(["a"]) == ("GET",)
    assert p.permitted_actions(["b"]) == ()


def test_database_survives_restart(tmp_path):
    store = store_with(2, PolicyDatabase(tmp_path))
    store.update_policy("R1", rules(get=("z",)), ["location_id"], now=300.0)
    again = PolicyStore(PolicyDatabase(tmp_path))
    assert again.resource_ids() == ["R0", "R1"]
    p = again.get_policy("R1")
    assert p.rap_Tno == 1 and p.required_credentials == ("location_id", "password", "username")
    assert [e.policy.rap_Tno for e in again.archive("R1")] == [0]
    assert not list(tmp_path.glob(".*.tmp"))
    assert json.loads((tmp_path / "R1.json").read_text())["rap_Tno"] == 1


def test_database_rejects_misnamed_file(tmp_path):
    (tmp_path / "A.json").write_text(json.dumps({"resource_id": "B", "rules": []}))
    with pytest.raises(MalformedPolicy):
        PolicyDatabase(tmp_path)


def test_concurrent_readers_never_see_torn_or_regressing_versions():
    store = store_with(3)
    stop = threading.Event()
    errors = []

    def reader(rid):
        last = -1
        while not stop.is_set():
            p = store.get_policy(rid)
            # each version v carries the role "v{v}" so a torn snapshot would show
            if p.rap_Tno < last or (p.rap_Tno and p.rules[0].allowed_roles != (f"v{p.rap_Tno}",)):
                errors.append((rid, last, p))
            last = p.rap_Tno

    threads = [threading.Thread(target=reader, args=(f"R{i % 3}",)) for i in range(6)]
    for th in threads:
        th.start()
    for v in range(1, 31):
        for k in range(3):
            store.update_policy(f"R{k}", rules(get=(f"v{v}",)), [], now=100.0 + v)
    stop.set()
    for th in threads:
        th.join()
    assert not errors
    assert all(store.get_policy(f"R{k}").rap_Tno == 30 for k in range(3))


def test_pinned_holds_off_updates():
    store = store_with(1)
    done = threading.Event()
    with store.pinned("R0") as p:
        th = threading.Thread(target=lambda: (store.update_policy("R0", rules(), [], now=1.0), done.set()))
        th.start()
        assert not done.wait(0.2)
        assert p.rap_Tno == 0
    th.join()
    assert store.get_policy("R0").rap_Tno == 1
