"""Policy-versioned JWT access gateway.

Access tokens carry a ``rapID`` claim binding them to specific versions of
each resource's access policy. When a policy changes, tokens bound to the
old version are trapped at the match gate and must be refreshed with the
credentials the new policy requires; the refreshed token keeps its ``jti``.
"""

from rapgate.clock import ManualClock, SystemClock
from rapgate.tokens import (
    RapIdBinding,
    SigningKey,
    KeySet,
    TokenHeader,
    TokenPayload,
    TokenError,
    encode_token,
    verify_token,
    mint_access_token,
)
from rapgate.policy import AccessRule, ResourceAccessPolicy, PolicyDatabase, PolicyStore
from rapgate.gate import AccessRequest, GateDecision, Outcome, PolicyMatchGate, match_gar
from rapgate.control import AuthCredentials, GrantedAccessRights, PolicyControl, Blacklist
from rapgate.monitor import ActivityMonitor, ActivityRecord, RiskCounter
from rapgate.gateway import Gateway, GatewayConfig, GatewayError

__all__ = [
    "ManualClock",
    "SystemClock",
    "RapIdBinding",
    "SigningKey",
    "KeySet",
    "TokenHeader",
    "TokenPayload",
    "TokenError",
    "encode_token",
    "verify_token",
    "mint_access_token",
    "AccessRule",
    "ResourceAccessPolicy",
    "PolicyDatabase",
    "PolicyStore",
    "AccessRequest",
    "GateDecision",
    "Outcome",
    "PolicyMatchGate",
    "match_gar",
    "AuthCredentials",
    "GrantedAccessRights",
    "PolicyControl",
    "Blacklist",
    "ActivityMonitor",
    "ActivityRecord",
    "RiskCounter",
    "Gateway",
    "GatewayConfig",
    "GatewayError",
]
