import json

import pytest

from conftest import build_gateway
from rapgate.cli import bundled
from rapgate.scenario import (
    ScenarioAssertionFailed,
    ScenarioParseError,
    parse_scenario,
    run_scenario_file,
    simulate,
)

# hand trace of the bundled use case (assert steps omitted):
# (step, resource, outcome, status, rap_Tno or bindings)
HAND_TRACE = [
    ("auth", None, "issued", 200, {"X": 0}),
    ("access", "X", "allow", 200, None),
    ("update_policy", "X", "policy_updated", 200, 1),
    ("access", "X", "trap", 401, 1),
    ("refresh", "X", "refreshed", 200, 1),
    ("access", "X", "allow", 200, None),
    ("access", "Y", "trap", 401, 0),
    ("refresh", "Y", "refreshed", 200, 0),
    ("access", "Y", "allow", 200, None),
]


def trace_of(transcript):
    out = []
    for e in transcript.entries:
        if e["step"] == "assert":
            continue
        d = e.get("detail") or {}
        out.append((e["step"], e.get("resource"), e["outcome"], e["status"], d.get("bindings", d.get("rap_Tno"))))
    return out


def test_bundled_scenario_matches_hand_trace(tmp_path):
    t = run_scenario_file(bundled("scenario.json"), bundled("config.json"), tmp_path / "t.jsonl")
    assert t.ok, t.failures
    assert trace_of(t) == HAND_TRACE
    jtis = {e["detail"]["jti"] for e in t.entries if e["step"] in ("auth", "refresh")}
    assert len(jtis) == 1
    traps = [e["detail"] for e in t.entries if e["outcome"] == "trap"]
    assert [d["reason"] for d in traps] == ["stale_binding", "unbound_resource"]
    assert traps[0]["required_credentials"] == ["ip_address", "password", "username"]
    assert traps[1]["required_credentials"] == ["location_id", "password", "username"]
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == len(t.entries)


def test_bundled_run_leaves_fixture_untouched():
    before = json.loads(open(bundled("policies/X.json")).read())
    run_scenario_file(bundled("scenario.json"), bundled("config.json"))
    assert json.loads(open(bundled("policies/X.json")).read()) == before


def test_empty_scenario(gateway):
    assert simulate({"steps": []}, gateway).entries == []
    assert simulate([], gateway).ok


def test_failed_assert_is_reported(gateway):
    steps = [
        {"step": "auth", "client": "a", "credentials": {"username": "userA", "password": "pw-A"}},
        {"step": "access", "client": "a", "resource": "X"},
        {"step": "assert", "outcome": "trap"},
    ]
    t = simulate(steps, gateway)
    assert not t.ok and t.failures[0]["index"] == 2
    with pytest.raises(ScenarioAssertionFailed) as err:
        simulate(steps, build_gateway(None, gateway.clock), strict=True)
    assert err.value.transcript.entries[-1]["outcome"] == "fail"


def test_errors_become_outcomes(gateway):
    steps = [
        {"step": "auth", "client": "c", "credentials": {"username": "userC", "password": "pw-C"}},
        {"step": "assert", "outcome": "registration_required", "status": 401},
        {"step": "update_policy", "resource": "Q", "policy": {"rules": []}},
        {"step": "advance", "seconds": 5},
    ]
    t = simulate(steps, gateway, strict=True)
    assert [e["outcome"] for e in t.entries] == ["registration_required", "pass", "not_found", "advanced"]


@pytest.mark.parametrize("doc", [
    "x",
    {"steps": "x"},
    [{"step": "fly"}],
    [{"step": "access", "client": "a"}],
    [{"step": "assert", "client": "a"}],
])
def test_parse_errors(doc):
    with pytest.raises(ScenarioParseError):
        parse_scenario(doc)
