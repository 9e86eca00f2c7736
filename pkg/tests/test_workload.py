from dataclasses import replace

import pytest

from rapgate import gate as gate_mod
from rapgate import monitor as pam
from rapgate.gate import GateDecision, Outcome
from rapgate.monitor import ActivityRecord
from rapgate.workload import (
    WorkloadSpec,
    audit_tallies,
    jti_chain_violations,
    replay_acceptances,
    run_workload,
    stale_allow_violations,
)

SMALL = WorkloadSpec(clients=10, requests_per_client=30, resources=3, updates=6, seed=3)


def test_small_run_is_clean_and_deterministic():
    a, b = run_workload(SMALL), run_workload(SMALL)
    assert a.mispredictions == []
    assert a.updates == b.updates
    assert [r.outcome for r in a.gateway.monitor.records] == [r.outcome for r in b.gateway.monitor.records]
    assert sum(tl.requests for tl in a.tallies.values()) == 300


def test_workload_with_disk_sink(tmp_path):
    r = run_workload(SMALL, base_dir=tmp_path)
    r.gateway.close()
    assert len((tmp_path / "audit.jsonl").read_text().splitlines()) == len(r.gateway.monitor)
    assert (tmp_path / "policies" / "R0.json").exists()


def test_detectors_catch_a_gate_that_ignores_staleness(monkeypatch):
    """Negative control: break the gate and the audit checks must notice."""
    real = gate_mod.decide

    def lax(binding, policy, gar, action):
        if binding is not None and binding.rap_Tno < policy.rap_Tno:
            return GateDecision(Outcome.ALLOW, "in_sync", policy.rap_Tno)
        return real(binding, policy, gar, action)

    monkeypatch.setattr(gate_mod, "decide", lax)
    r = run_workload(SMALL)
    assert stale_allow_violations(r.gateway.monitor.records, r.initial_versions)
    assert r.stale_trapped < r.stale_requests
    assert r.mispredictions


def test_detectors_catch_a_missing_blacklist(monkeypatch):
    r = run_workload(SMALL)
    assert max(replay_acceptances(r.gateway, r.issued).values()) <= 1
    monkeypatch.setattr(r.gateway.control.blacklist, "is_blacklisted", lambda key, now: False)
    assert max(replay_acceptances(r.gateway, r.issued).values()) > 1


def test_chain_checker_flags_misordered_records():
    rec = lambda seq, outcome, rid=None: ActivityRecord(seq, float(seq), outcome, resource_id=rid, jti="j")
    good = [rec(1, pam.TOKEN_ISSUED), rec(2, pam.TRAP_REQUIRED, "X"), rec(3, pam.TRAP_RESOLVED, "X"),
            rec(4, pam.TOKEN_BLACKLISTED), rec(5, pam.TOKEN_ISSUED)]
    assert jti_chain_violations(good) == []
    assert jti_chain_violations(good[1:])  # no initial issue
    assert jti_chain_violations([good[0], good[2], good[3], good[4]])  # resolve without trap
    assert jti_chain_violations(good[:4])  # no successor issued
    assert jti_chain_violations([good[0], good[1], good[2], good[4], good[3]])  # issue before blacklist


def test_stale_checker_follows_update_order():
    recs = [
        ActivityRecord(1, 0.0, pam.ALLOW, resource_id="X", policy_version=0),
        ActivityRecord(2, 1.0, pam.POLICY_UPDATED, resource_id="X", policy_version=1),
        ActivityRecord(3, 2.0, pam.ALLOW, resource_id="X", policy_version=0),
        ActivityRecord(4, 3.0, pam.ALLOW, resource_id="X", policy_version=1),
        ActivityRecord(5, 4.0, pam.ALLOW, resource_id="X", policy_version=1, detail={"binding_Tno": 0}),
        ActivityRecord(6, 5.0, pam.ALLOW, resource_id="X", policy_version=1, detail={"binding_Tno": 1}),
    ]
    assert [r.seq for r in stale_allow_violations(recs, {"X": 0})] == [3, 5]


def test_audit_tallies_miscount_detected():
    r = run_workload(SMALL)
    counts = audit_tallies(r.gateway.monitor, r.users, r.gateway.clock.now())
    user = next(iter(r.users))
    assert counts[user].requests == r.tallies[user].requests
    r.gateway.monitor.record(pam.DENY, subject=user, resource_id="R0", timestamp=r.gateway.clock.now())
    counts = audit_tallies(r.gateway.monitor, r.users, r.gateway.clock.now())
    assert counts[user].requests == r.tallies[user].requests + 1
