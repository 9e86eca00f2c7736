"""Policy match gate: per-request comparison of a token's bindings with the current policy."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Callable

from rapgate import monitor as pam
from rapgate.policy import PolicyStore, ResourceAccessPolicy
from rapgate.tokens import RapIdBinding, TokenPayload


class Outcome(str, enum.Enum):
    ALLOW = "Allow"
    DENY = "Deny"
    TRAP = "TrapRequired"


@dataclass(frozen=True)
class AccessRequest:
    """A request whose token already passed signature and blacklist checks."""

    subject: str
    resource_id: str
    action: str
    token_payload: TokenPayload
    received_at: float


@dataclass(frozen=True)
class GateDecision:
    outcome: Outcome
    reason: str
    policy_version_seen: int
    required_credentials: tuple[str, ...] = ()


def match_gar(gar: Any, policy: ResourceAccessPolicy, action: str) -> bool:
    rule = policy.rule_for(action)
    if rule is None or not rule.allow:
        return False
    grants = getattr(gar, "grants", gar)
    return action in grants.get(policy.resource_id, ())


def decide(
    binding: RapIdBinding | None, policy: ResourceAccessPolicy, gar: Any, action: str
) -> GateDecision:
    current = policy.rap_Tno
    if binding is None:
        return GateDecision(Outcome.TRAP, "unbound_resource", current, policy.required_credentials)
    if binding.rap_Tno > current:
        return GateDecision(Outcome.DENY, "future_binding", current)
    if binding.rap_Tno < current:
        return GateDecision(Outcome.TRAP, "stale_binding", current, policy.required_credentials)
    if not binding.rap_V:
        return GateDecision(Outcome.TRAP, "binding_invalid", current, policy.required_credentials)
    if match_gar(gar, policy, action):
        return GateDecision(Outcome.ALLOW, "in_sync", current)
    return GateDecision(Outcome.DENY, "gar_mismatch", current)


class PolicyMatchGate:
    """Decides Allow / Deny / TrapRequired and reports every decision to the monitor.

    The decision and its log record are made while updates to the resource
    are held off, so the log never shows an Allow after the PolicyUpdated
    record that made it stale.
    """

    def __init__(
        self,
        store: PolicyStore,
        monitor: pam.ActivityMonitor | None = None,
        on_trap: Callable[[AccessRequest, GateDecision], None] | None = None,
    ):
        self.store = store
        self.monitor = monitor
        self.on_trap = on_trap

    def check(self, request: AccessRequest) -> GateDecision:
        payload = request.token_payload
        with self.store.pinned(request.resource_id) as policy:
            binding = payload.binding_for(request.resource_id)
            if request.subject != payload.sub:
                decision = GateDecision(Outcome.DENY, "subject_mismatch", policy.rap_Tno)
            else:
                decision = decide(binding, policy, payload.gar, request.action)
            if self.monitor is not None:
                self.monitor.record(
                    decision.outcome.value,
                    subject=request.subject,
                    resource_id=request.resource_id,
                    action=request.action,
                    jti=payload.jti,
                    policy_version=decision.policy_version_seen,
                    reason=decision.reason,
                    stage="pmg",
                    detail={"binding_Tno": binding.rap_Tno if binding is not None else None},
                    timestamp=request.received_at,
                )
            if decision.outcome is Outcome.TRAP and self.on_trap is not None:
                self.on_trap(request, decision)
        return decision
