"""Policy control: trap bookkeeping, trap-response validation, same-jti re-issue, blacklist."""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from rapgate import monitor as pam
from rapgate.identity import IdentityStore
from rapgate.policy import PolicyStore, ResourceAccessPolicy
from rapgate.tokens import (
    ACTIONS,
    CREDENTIAL_FIELDS,
    KeySet,
    TokenPayload,
    mint_access_token,
    token_fingerprint,
)


class ControlError(Exception):
    code = "control_error"


class Unauthorized(ControlError):
    code = "unauthorized"


class PolicyMismatch(ControlError):
    code = "policy_mismatch"


class NoPendingTrap(ControlError):
    code = "no_pending_trap"


class ValidationNotPerformed(ControlError):
    code = "validation_not_performed"


@dataclass(frozen=True)
class AuthCredentials:
    username: str
    password: str | None = field(default=None, repr=False)
    location_id: str | None = None
    ip_address: str | None = None

    def __post_init__(self):
        if not isinstance(self.username, str) or not self.username:
            raise ValueError("username must be a non-empty string")
        for name in ("password", "location_id", "ip_address"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, str):
                raise ValueError(f"{name} must be a string")

    def supplied_fields(self) -> frozenset[str]:
        return frozenset(
            name for name in CREDENTIAL_FIELDS if getattr(self, name) not in (None, "")
        )

    @classmethod
    def from_mapping(cls, doc: Any) -> "AuthCredentials":
        if not isinstance(doc, Mapping):
            raise ValueError("credentials must be an object")
        unknown = set(doc) - CREDENTIAL_FIELDS
        if unknown:
            raise ValueError(f"unknown credential fields {sorted(unknown)}")
        return cls(**{k: doc[k] for k in doc})


@dataclass(frozen=True)
class GrantedAccessRights:
    grants: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        grants = {r: frozenset(a) for r, a in self.grants.items()}
        for actions in grants.values():
            if not actions <= set(ACTIONS):
                raise ValueError(f"unknown actions {sorted(actions - set(ACTIONS))}")
        object.__setattr__(self, "grants", grants)

    def with_resource(self, resource_id: str, actions: Iterable[str]) -> "GrantedAccessRights":
        grants = dict(self.grants)
        grants[resource_id] = frozenset(actions)
        return GrantedAccessRights(grants)

    @classmethod
    def derive(cls, roles: Iterable[str], policies: Iterable[ResourceAccessPolicy]) -> "GrantedAccessRights":
        roles = tuple(roles)
        return cls({p.resource_id: frozenset(p.permitted_actions(roles)) for p in policies})


@dataclass(frozen=True)
class TrapResolution:
    jti: str
    resource_id: str
    supplied_credentials: AuthCredentials
    resolved_at: float


@dataclass(frozen=True)
class PendingTrap:
    jti: str
    resource_id: str
    required_version: int
    required_credentials: tuple[str, ...]
    trapped_at: float
    expires_at: float


@dataclass(frozen=True)
class BlacklistEntry:
    jti: str
    blacklisted_at: float
    expires_at: float


class Blacklist:
    """Superseded tokens, kept until their own expiry plus ``grace`` seconds.

    ``grace`` must cover the verifier's clock skew, or a superseded token
    would verify again in the window between expiry and expiry + skew.

    Entries are keyed by the SHA-256 digest of the caller's key, so lookups
    compare fixed-length digests rather than attacker-chosen strings.
    Expired entries are purged on every call.
    """

    def __init__(self, grace: float = 0.0):
        self.grace = grace
        self._entries: dict[bytes, BlacklistEntry] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _digest(key: str) -> bytes:
        return hashlib.sha256(key.encode("utf-8")).digest()

    def _purge(self, now: float) -> int:
        dead = [k for k, e in self._entries.items() if e.expires_at <= now]
        for k in dead:
            del self._entries[k]
        return len(dead)

    def purge(self, now: float) -> int:
        with self._lock:
            return self._purge(now)

    def blacklist(self, jti: str, token_exp: float, now: float) -> bool:
        """Idempotent; returns True only when the entry is new."""
        digest = self._digest(jti)
        with self._lock:
            self._purge(now)
            if digest in self._entries or token_exp + self.grace <= now:
                return False
            self._entries[digest] = BlacklistEntry(jti, now, token_exp + self.grace)
            return True

    def is_blacklisted(self, jti: str, now: float) -> bool:
        digest = self._digest(jti)
        with self._lock:
            self._purge(now)
            return digest in self._entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class PolicyControl:
    """Resolves process-traps.

    A trapped token is recorded by ``register_trap`` (the gate's trap hook).
    Resolving it takes a successful ``validate_trap_response`` followed by
    ``reissue_token``, which blacklists the old compact token and only then
    signs its successor under the same jti.
    """

    def __init__(
        self,
        store: PolicyStore,
        identities: IdentityStore,
        keyset: KeySet,
        monitor: pam.ActivityMonitor | None = None,
        ttl: float = 300.0,
        trap_timeout: float = 300.0,
        issuer: str = "rapgate",
        audience: str = "rapgate-clients",
        skew: float = 30.0,
    ):
        self.store = store
        self.identities = identities
        self.keyset = keyset
        self.monitor = monitor
        self.ttl = ttl
        self.trap_timeout = trap_timeout
        self.issuer = issuer
        self.audience = audience
        self.blacklist = Blacklist(grace=skew)
        self._pending: dict[str, dict[str, PendingTrap]] = {}
        self._validated: set[tuple[str, str, int]] = set()
        self._lock = threading.Lock()
        self._jti_locks: dict[str, threading.Lock] = {}

    def _record(self, outcome: str, **fields) -> None:
        if self.monitor is not None:
            self.monitor.record(outcome, stage="control", **fields)

    @contextmanager
    def token_lock(self, jti: str):
        """Serializes trap resolution per jti."""
        with self._lock:
            lock = self._jti_locks.setdefault(jti, threading.Lock())
        with lock:
            yield

    # trap state

    def register_trap(self, request, decision) -> PendingTrap:
        now = request.received_at
        trap = PendingTrap(
            jti=request.token_payload.jti,
            resource_id=request.resource_id,
            required_version=decision.policy_version_seen,
            required_credentials=tuple(decision.required_credentials),
            trapped_at=now,
            expires_at=now + self.trap_timeout,
        )
        with self._lock:
            self._pending.setdefault(trap.jti, {})[trap.resource_id] = trap
        return trap

    def pending_trap(self, jti: str, resource_id: str, now: float) -> PendingTrap | None:
        with self._lock:
            traps = self._pending.get(jti, {})
            trap = traps.get(resource_id)
            if trap is not None and trap.expires_at <= now:
                del traps[resource_id]
                trap = None
            if not traps:
                self._pending.pop(jti, None)
            return trap

    def pending_count(self) -> int:
        with self._lock:
            return sum(len(t) for t in self._pending.values())

    def _clear_trap(self, jti: str, resource_id: str) -> None:
        with self._lock:
            traps = self._pending.get(jti)
            if traps is not None:
                traps.pop(resource_id, None)
                if not traps:
                    del self._pending[jti]

    # validation

    def trap_response_problem(
        self, old_payload: TokenPayload, resolution: TrapResolution, policy: ResourceAccessPolicy
    ) -> str | None:
        """None when the response passes; otherwise ``unauthorized`` or ``policy_mismatch``."""
        creds = resolution.supplied_credentials
        identity_ok = creds.username == old_payload.sub and self.identities.check(creds)
        covers = set(policy.required_credentials) <= creds.supplied_fields()
        if not identity_ok:
            return Unauthorized.code
        if not covers:
            return PolicyMismatch.code
        return None

    def validate_trap_response(
        self, old_payload: TokenPayload, resolution: TrapResolution, policy: ResourceAccessPolicy
    ) -> bool:
        ok = self.trap_response_problem(old_payload, resolution, policy) is None
        if ok:
            with self._lock:
                self._validated.add((old_payload.jti, resolution.resource_id, policy.rap_Tno))
        return ok

    # re-issue

    def reissue_token(
        self,
        old_payload: TokenPayload,
        resource_id: str,
        policy: ResourceAccessPolicy,
        now: float,
        old_token: str | None = None,
    ) -> str:
        key = (old_payload.jti, resource_id, policy.rap_Tno)
        with self._lock:
            if key not in self._validated:
                raise ValidationNotPerformed(f"no successful validation for {key}")
            self._validated.discard(key)
        jti = old_payload.jti
        if old_token is not None and self.blacklist.is_blacklisted(token_fingerprint(old_token), now):
            raise Unauthorized("token already superseded")

        self._record(
            pam.TRAP_RESOLVED,
            subject=old_payload.sub,
            resource_id=resource_id,
            jti=jti,
            policy_version=policy.rap_Tno,
            reason="credentials_validated",
            timestamp=now,
        )
        if old_token is not None:
            ref = token_fingerprint(old_token)
            self.blacklist.blacklist(ref, old_payload.exp, now)
            self._record(
                pam.TOKEN_BLACKLISTED,
                subject=old_payload.sub,
                jti=jti,
                reason="superseded",
                detail={"token_ref": ref, "expires_at": old_payload.exp},
                timestamp=now,
            )

        identity = self.identities.get(old_payload.sub)
        roles = identity.roles if identity is not None else ()
        bindings = [b for b in old_payload.rapID if b.resource_id != resource_id] + [policy]
        gar = {r: a for r, a in old_payload.gar.items() if r != resource_id}
        actions = policy.permitted_actions(roles)
        if actions:
            gar[resource_id] = actions
        token = mint_access_token(
            old_payload.sub,
            gar,
            bindings,
            self.ttl,
            self.keyset.active,
            now,
            jti=jti,
            issuer=self.issuer,
            audience=self.audience,
        )
        self._record(
            pam.TOKEN_ISSUED,
            subject=old_payload.sub,
            resource_id=resource_id,
            jti=jti,
            policy_version=policy.rap_Tno,
            reason="reissue",
            detail={"token_ref": token_fingerprint(token), "expires_at": now + self.ttl},
            timestamp=now,
        )
        self._clear_trap(jti, resource_id)
        return token

    def restore_blacklist(self, records: Iterable[pam.ActivityRecord], now: float) -> int:
        """Rebuild the blacklist from TokenBlacklisted audit records (used at startup)."""
        restored = 0
        for rec in records:
            if rec.outcome == pam.TOKEN_BLACKLISTED and "token_ref" in rec.detail:
                restored += self.blacklist.blacklist(rec.detail["token_ref"], rec.detail["expires_at"], now)
        return restored
