"""Deterministic multi-client workload with randomly timed policy updates.

The driver keeps its own model of every policy and predicts each request's
outcome from that model alone, so its tallies are independent of the audit
log they are later compared with.
"""

from __future__ import annotations

import math
import os
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from rapgate import monitor as pam
from rapgate.clock import ManualClock
from rapgate.gateway import Forbidden, Gateway, TrapChallenge, Unauthorized
from rapgate.identity import IdentityStore
from rapgate.monitor import ActivityMonitor, ActivityRecord
from rapgate.policy import AccessRule, PolicyDatabase, PolicyStore
from rapgate.tokens import KeySet, SigningKey, decode_token

ADMIN_KEY = "workload-admin"
ROLE_CHOICES = (("reader", "writer"), ("writer",), ("reader",), ())


@dataclass(frozen=True)
class WorkloadSpec:
    clients: int = 100
    requests_per_client: int = 100
    resources: int = 5
    updates: int = 20
    seed: int = 0
    step_seconds: float = 0.05
    ttl: float = 300.0
    post_fraction: float = 0.3
    password_iterations: int = 1_000
    reauth_margin: float = 5.0


@dataclass
class Tally:
    requests: int = 0
    allows: int = 0
    denies: int = 0
    traps: int = 0
    rejected: int = 0
    refreshes: int = 0
    auths: int = 0


@dataclass(frozen=True)
class User:
    username: str
    password: str
    roles: tuple[str, ...]
    location_id: str
    ip_address: str

    def credentials(self, full: bool = False) -> dict[str, str]:
        creds = {"username": self.username, "password": self.password}
        if full:
            creds.update(location_id=self.location_id, ip_address=self.ip_address)
        return creds


@dataclass
class WorkloadResult:
    gateway: Gateway
    users: dict[str, User]
    tallies: dict[str, Tally]
    issued: dict[str, list[str]]
    initial_versions: dict[str, int]
    updates: list[tuple[str, int]] = field(default_factory=list)
    mispredictions: list[dict[str, Any]] = field(default_factory=list)
    stale_requests: int = 0
    stale_trapped: int = 0
    refresh_jti_changes: int = 0


def make_users(n: int) -> list[User]:
    return [
        User(
            username=f"user{i:03d}",
            password=f"pw-{i}-secret",
            roles=("writer",) if i % 2 == 0 else ("reader",),
            location_id=f"LOC-{i % 7}",
            ip_address=f"10.1.{i // 250}.{i % 250}",
        )
        for i in range(n)
    ]


def initial_policy_document(k: int) -> dict[str, Any]:
    extra = {1: ["location_id"], 2: ["ip_address"]}.get(k % 3, [])
    return {
        "sensitivity": "sensitive" if extra else "non_sensitive",
        "required_credentials": ["username", "password", *extra],
        "rules": [
            {"action": "GET", "allowed_roles": ["reader", "writer"], "allow": True},
            {"action": "POST", "allowed_roles": ["writer"], "allow": True},
        ],
    }


def random_policy_document(rng: random.Random) -> dict[str, Any]:
    extra = [f for f in ("location_id", "ip_address") if rng.random() < 0.4]
    return {
        "required_credentials": ["username", "password", *extra],
        "rules": [
            {"action": "GET", "allowed_roles": list(rng.choice(ROLE_CHOICES[:3])), "allow": True},
            {"action": "POST", "allowed_roles": list(rng.choice(ROLE_CHOICES)), "allow": rng.random() < 0.8},
        ],
    }


def build_gateway(
    spec: WorkloadSpec,
    clock: ManualClock,
    base_dir: str | os.PathLike | None = None,
    users: Iterable[User] | None = None,
) -> tuple[Gateway, dict[str, User]]:
    users = list(users) if users is not None else make_users(spec.clients)
    identities = IdentityStore()
    for u in users:
        identities.register(
            u.username, u.password, u.roles, u.location_id, u.ip_address, iterations=spec.password_iterations
        )
    base = Path(base_dir) if base_dir is not None else None
    store = PolicyStore(PolicyDatabase(base / "policies" if base else None), clock=clock)
    for k in range(spec.resources):
        doc = initial_policy_document(k)
        store.create_policy(
            f"R{k}",
            [AccessRule.from_document(r) for r in doc["rules"]],
            doc["required_credentials"],
            doc["sensitivity"],
            now=clock.now(),
        )
    monitor = ActivityMonitor(base / "audit.jsonl" if base else None, clock=clock)
    gateway = Gateway(
        store,
        identities,
        KeySet([SigningKey.generate("wk-1")]),
        monitor,
        clock=clock,
        ttl=spec.ttl,
        admin_key=ADMIN_KEY,
    )
    return gateway, {u.username: u for u in users}


def _expected(payload, resource_id: str, action: str, model: dict[str, Any], version: int, roles) -> str:
    binding = payload.binding_for(resource_id)
    if binding is None or binding.rap_Tno < version:
        return "trap"
    for rule in model["rules"]:
        if rule["action"] == action and rule["allow"] and set(rule["allowed_roles"]) & set(roles):
            return "allow"
    return "deny"


def run_workload(spec: WorkloadSpec = WorkloadSpec(), base_dir: str | os.PathLike | None = None) -> WorkloadResult:
    rng = random.Random(spec.seed)
    clock = ManualClock()
    gateway, users = build_gateway(spec, clock, base_dir)
    resources = [f"R{k}" for k in range(spec.resources)]
    model = {f"R{k}": initial_policy_document(k) for k in range(spec.resources)}
    versions = {r: 0 for r in resources}
    result = WorkloadResult(
        gateway=gateway,
        users=users,
        tallies={name: Tally() for name in users},
        issued=defaultdict(list),
        initial_versions=dict(versions),
    )

    schedule = [name for name in users for _ in range(spec.requests_per_client)]
    rng.shuffle(schedule)
    update_at = sorted(rng.sample(range(len(schedule)), spec.updates))
    tokens: dict[str, tuple[str, Any]] = {}

    def take(name: str, token: str) -> Any:
        _, payload = decode_token(token)
        tokens[name] = (token, payload)
        result.issued[payload.jti].append(token)
        return payload

    for i, name in enumerate(schedule):
        while update_at and update_at[0] == i:
            update_at.pop(0)
            rid = rng.choice(resources)
            doc = random_policy_document(rng)
            versions[rid] = gateway.admin_update_policy(rid, doc, ADMIN_KEY)
            model[rid] = doc
            result.updates.append((rid, versions[rid]))
        now = clock.advance(spec.step_seconds)
        user, tally = users[name], result.tallies[name]

        if name not in tokens or tokens[name][1].exp - now < spec.reauth_margin:
            take(name, gateway.authenticate(user.credentials()).access_token)
            tally.auths += 1
        token, payload = tokens[name]

        rid = rng.choice(resources)
        action = "POST" if rng.random() < spec.post_fraction else "GET"
        expected = _expected(payload, rid, action, model[rid], versions[rid], user.roles)
        binding = payload.binding_for(rid)
        stale = binding is not None and binding.rap_Tno < versions[rid]

        tally.requests += 1
        try:
            gateway.access_resource(token, rid, action)
            outcome = "allow"
            tally.allows += 1
        except TrapChallenge:
            outcome = "trap"
            tally.traps += 1
            new = gateway.refresh_after_trap(token, rid, user.credentials(full=True))
            new_payload = take(name, new.access_token)
            tally.refreshes += 1
            if new_payload.jti != payload.jti:
                result.refresh_jti_changes += 1
        except Forbidden:
            outcome = "deny"
            tally.denies += 1
        except Unauthorized:
            outcome = "rejected"
            tally.rejected += 1

        if stale:
            result.stale_requests += 1
            result.stale_trapped += outcome == "trap"
        if outcome != expected:
            result.mispredictions.append(
                {"index": i, "user": name, "resource": rid, "action": action, "expected": expected, "got": outcome}
            )

    result.issued = dict(result.issued)
    return result


# audit-log analyses


def stale_allow_violations(records: Iterable[ActivityRecord], initial_versions: dict[str, int]) -> list[ActivityRecord]:
    """Allow records made against a version behind the resource's version at that point of the log.

    Both the version the gate read (``policy_version``) and the version the
    token was bound to (``detail.binding_Tno``) must be current.
    """
    current = dict(initial_versions)
    bad = []
    for rec in records:
        if rec.outcome == pam.POLICY_UPDATED:
            current[rec.resource_id] = rec.policy_version
        elif rec.outcome == pam.ALLOW:
            seen = [rec.policy_version, rec.detail.get("binding_Tno", rec.policy_version)]
            if any(v is None or v < current.get(rec.resource_id, 0) for v in seen):
                bad.append(rec)
    return bad


def jti_chain_violations(records: Iterable[ActivityRecord]) -> list[str]:
    """Check per-jti ordering: issue first; every resolve answers an earlier trap and is
    followed directly by the blacklisting of the old token and the successor's issue."""
    by_jti: dict[str, list[ActivityRecord]] = defaultdict(list)
    for rec in records:
        if rec.jti is not None:
            by_jti[rec.jti].append(rec)
    problems = []
    for jti, chain in by_jti.items():
        if chain[0].outcome != pam.TOKEN_ISSUED:
            problems.append(f"{jti}: first record is {chain[0].outcome}")
        open_traps: set[str] = set()
        for k, rec in enumerate(chain):
            if rec.outcome == pam.TRAP_REQUIRED:
                open_traps.add(rec.resource_id)
            elif rec.outcome == pam.TRAP_RESOLVED:
                if rec.resource_id not in open_traps:
                    problems.append(f"{jti}: TrapResolved on {rec.resource_id} without a TrapRequired")
                open_traps.discard(rec.resource_id)
                nxt = [r.outcome for r in chain[k + 1 : k + 3]]
                if nxt != [pam.TOKEN_BLACKLISTED, pam.TOKEN_ISSUED]:
                    problems.append(f"{jti}: TrapResolved followed by {nxt}")
    return problems


def replay_acceptances(gateway: Gateway, issued: dict[str, list[str]]) -> dict[str, int]:
    """For each jti, how many of its historically issued tokens the gateway still accepts."""
    return {jti: sum(gateway.token_accepted(t) for t in tokens) for jti, tokens in issued.items()}


def audit_tallies(monitor: ActivityMonitor, subjects: Iterable[str], now: float) -> dict[str, Tally]:
    out = {}
    for s in subjects:
        c = monitor.stats(subject=s, window=math.inf, now=now)
        out[s] = Tally(requests=c.request_count, denies=c.deny_count, traps=c.trap_count)
    return out
