"""Scripted scenarios: drive a gateway through auth / access / update_policy / refresh / assert steps."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from rapgate import gateway as gw
from rapgate.clock import ManualClock
from rapgate.tokens import decode_token

STEP_KINDS = ("auth", "access", "update_policy", "refresh", "assert", "advance")

_OUTCOME_BY_ERROR = {
    gw.TrapChallenge: "trap",
    gw.RegistrationRequired: "registration_required",
    gw.Unauthorized: "unauthorized",
    gw.Forbidden: "forbidden",
    gw.PolicyMismatchError: "policy_mismatch",
    gw.NotFound: "not_found",
    gw.NoPendingTrapError: "no_pending_trap",
    gw.MalformedPolicyError: "malformed_policy",
    gw.BadRequest: "bad_request",
}


class ScenarioParseError(ValueError):
    pass


class ScenarioAssertionFailed(AssertionError):
    def __init__(self, failures, transcript):
        super().__init__(f"{len(failures)} scenario assertion(s) failed: {failures}")
        self.failures = failures
        self.transcript = transcript


@dataclass
class _Client:
    tokens: list[str] = field(default_factory=list)
    first_jti: str | None = None
    last: dict[str, Any] | None = None


@dataclass
class Transcript:
    entries: list[dict[str, Any]] = field(default_factory=list)
    failures: list[dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def outcomes(self) -> list[tuple[str, str]]:
        return [(e["step"], e["outcome"]) for e in self.entries]

    def to_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)


def parse_scenario(doc: Any) -> list[dict[str, Any]]:
    if isinstance(doc, Mapping):
        doc = doc.get("steps", [])
    if not isinstance(doc, list):
        raise ScenarioParseError("scenario must be a list of steps or an object with 'steps'")
    steps = []
    for i, step in enumerate(doc):
        if not isinstance(step, Mapping) or step.get("step") not in STEP_KINDS:
            raise ScenarioParseError(f"step {i}: 'step' must be one of {STEP_KINDS}")
        kind = step["step"]
        need = {
            "auth": ("client", "credentials"),
            "access": ("client", "resource"),
            "update_policy": ("resource", "policy"),
            "refresh": ("client", "resource", "credentials"),
            "advance": ("seconds",),
            "assert": (),
        }[kind]
        missing = [k for k in need if k not in step]
        if missing:
            raise ScenarioParseError(f"step {i} ({kind}): missing {missing}")
        if kind == "assert" and not ({"outcome", "rap_Tno", "same_jti", "status"} & set(step)):
            raise ScenarioParseError(f"step {i}: assert needs outcome, status, rap_Tno or same_jti")
        steps.append(dict(step))
    return steps


def load_scenario(path: str | os.PathLike) -> dict[str, Any]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ScenarioParseError(f"cannot read scenario {path}: {exc}") from exc
    parse_scenario(doc)
    return doc


def _error_entry(exc: gw.GatewayError) -> tuple[str, dict[str, Any]]:
    for cls, name in _OUTCOME_BY_ERROR.items():
        if isinstance(exc, cls):
            return name, dict(exc.extra, code=exc.code, message=exc.message)
    return "error", {"code": exc.code}


def simulate(scenario: Any, gateway: gw.Gateway, strict: bool = False) -> Transcript:
    """Run ``scenario`` (a step list or ``{"steps": [...]}``) against ``gateway``.

    Every step adds one transcript entry. With ``strict`` a failed assert
    raises ScenarioAssertionFailed once all steps have run.
    """
    steps = parse_scenario(scenario)
    clients: dict[str, _Client] = {}
    transcript = Transcript()
    last_client = None

    for index, step in enumerate(steps):
        kind = step["step"]
        name = step.get("client", last_client if kind == "assert" else None)
        client = clients.setdefault(name, _Client()) if name is not None else None
        entry: dict[str, Any] = {"index": index, "step": kind}
        if name is not None:
            entry["client"] = name
        if "resource" in step:
            entry["resource"] = step["resource"]
        try:
            if kind == "auth":
                resp = gateway.authenticate(step["credentials"])
                _, payload = decode_token(resp.access_token)
                client.tokens.append(resp.access_token)
                client.first_jti = client.first_jti or payload.jti
                entry.update(outcome="issued", status=200, detail={
                    "jti": payload.jti,
                    "bindings": {b.resource_id: b.rap_Tno for b in payload.rapID},
                })
            elif kind == "access":
                token = _pick_token(client, step.get("token", "current"))
                action = step.get("action", "GET")
                entry["action"] = action
                res = gateway.access_resource(token, step["resource"], action)
                entry.update(outcome="allow", status=200, detail={"content": res.content})
            elif kind == "update_policy":
                version = gateway.admin_update_policy(step["resource"], step["policy"], gateway.admin_key)
                entry.update(outcome="policy_updated", status=200, detail={"rap_Tno": version})
            elif kind == "refresh":
                resp = gateway.refresh_after_trap(client.tokens[-1] if client.tokens else "", step["resource"], step["credentials"])
                _, payload = decode_token(resp.access_token)
                client.tokens.append(resp.access_token)
                entry.update(outcome="refreshed", status=200, detail={"jti": payload.jti, "rap_Tno": resp.rap_Tno})
            elif kind == "advance":
                if not isinstance(gateway.clock, ManualClock):
                    raise ScenarioParseError("advance needs a manual clock")
                gateway.clock.advance(float(step["seconds"]))
                entry.update(outcome="advanced", status=200, detail={"now": gateway.clock.now()})
            elif kind == "assert":
                problems = _check(step, client)
                entry.update(outcome="pass" if not problems else "fail", status=200 if not problems else 500)
                if problems:
                    entry["detail"] = {"problems": problems}
                    transcript.failures.append({"index": index, "problems": problems})
        except gw.GatewayError as exc:
            outcome, detail = _error_entry(exc)
            entry.update(outcome=outcome, status=exc.status, detail=detail)
        if kind != "assert" and client is not None:
            client.last = entry
        if name is not None:
            last_client = name
        transcript.entries.append(entry)

    if strict and transcript.failures:
        raise ScenarioAssertionFailed(transcript.failures, transcript)
    return transcript


def _pick_token(client: _Client, which: str) -> str:
    if not client.tokens:
        return ""
    if which == "current":
        return client.tokens[-1]
    if which == "previous":
        return client.tokens[-2] if len(client.tokens) > 1 else ""
    if which == "initial":
        return client.tokens[0]
    raise ScenarioParseError(f"unknown token selector {which!r}")


def _check(step: Mapping[str, Any], client: _Client | None) -> list[str]:
    if client is None or client.last is None:
        return ["no previous step for this client"]
    last = client.last
    problems = []
    if "outcome" in step and last.get("outcome") != step["outcome"]:
        problems.append(f"outcome {last.get('outcome')!r} != expected {step['outcome']!r}")
    if "status" in step and last.get("status") != step["status"]:
        problems.append(f"status {last.get('status')!r} != expected {step['status']!r}")
    if "rap_Tno" in step:
        seen = (last.get("detail") or {}).get("rap_Tno")
        if seen != step["rap_Tno"]:
            problems.append(f"rap_Tno {seen!r} != expected {step['rap_Tno']!r}")
    if "same_jti" in step and client.tokens:
        _, payload = decode_token(client.tokens[-1])
        if (payload.jti == client.first_jti) != bool(step["same_jti"]):
            problems.append(f"jti continuity {payload.jti == client.first_jti} != expected {step['same_jti']}")
    return problems


def run_scenario_file(
    scenario_path: str | os.PathLike,
    config_path: str | os.PathLike,
    transcript_path: str | os.PathLike | None = None,
    in_place: bool = False,
) -> Transcript:
    """Run a scenario file against a gateway built from ``config_path``.

    Unless ``in_place``, the policy database is copied and the audit sink
    redirected into a scratch directory so the configured state is untouched.
    The gateway clock is a manual clock starting at the scenario's
    ``start_time`` (default 1700000000).
    """
    scenario = load_scenario(scenario_path)
    config = gw.GatewayConfig.load(config_path)
    start = scenario.get("start_time", 1_700_000_000) if isinstance(scenario, Mapping) else 1_700_000_000
    with tempfile.TemporaryDirectory(prefix="rapgate-sim-") as scratch:
        if not in_place:
            scratch = Path(scratch)
            if config.policy_db_path is not None:
                shutil.copytree(config.policy_db_path, scratch / "policies")
                config.policy_db_path = scratch / "policies"
            config.audit_sink_path = scratch / "audit.jsonl"
        gateway = gw.Gateway.from_config(config, clock=ManualClock(start))
        if gateway.admin_key is None:
            gateway.admin_key = "scenario-admin"
        try:
            transcript = simulate(scenario, gateway)
        finally:
            gateway.close()
    if transcript_path is not None:
        Path(transcript_path).write_text(transcript.to_lines())
    return transcript
