"""Resource server with in-process authorization server and identity provider.

Per-request pipeline, in this order: token verification, blacklist check,
policy match gate (which logs its decision to the activity monitor).
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from rapgate import control as pcm
from rapgate import monitor as pam
from rapgate.clock import SystemClock
from rapgate.control import AuthCredentials, PolicyControl, TrapResolution
from rapgate.gate import AccessRequest, Outcome, PolicyMatchGate
from rapgate.identity import DEFAULT_ITERATIONS, IdentityStore
from rapgate.policy import (
    MalformedPolicy,
    PolicyDatabase,
    PolicyStore,
    UnknownResource,
    normalize_credentials,
    parse_rules,
)
from rapgate.tokens import (
    ACTIONS,
    DEFAULT_ALG_ALLOWLIST,
    KeySet,
    TokenError,
    TokenPayload,
    mint_access_token,
    token_fingerprint,
    verify_token,
)

TRAP_SCHEME = "RAP-Update"


class GatewayError(Exception):
    status = 500
    code = "internal_error"

    def __init__(self, message: str = "", *, code: str | None = None, headers: Mapping[str, str] | None = None, **extra):
        super().__init__(message or self.code)
        if code is not None:
            self.code = code
        self.message = message or self.code
        self.headers = dict(headers or {})
        self.extra = extra

    def to_document(self) -> dict[str, Any]:
        return {"error": self.code, "message": self.message, **self.extra}


class BadRequest(GatewayError):
    status = 400
    code = "bad_request"


class Unauthorized(GatewayError):
    status = 401
    code = "unauthorized"

    def __init__(self, message: str = "", **kw):
        kw.setdefault("headers", {"WWW-Authenticate": f'Bearer error="invalid_token", error_description="{message or self.code}"'})
        super().__init__(message, **kw)


class RegistrationRequired(GatewayError):
    status = 401
    code = "registration_required"


class TrapChallenge(GatewayError):
    """401 asking the client to refresh its credentials for an updated policy."""

    status = 401
    code = "rap_update_required"

    def __init__(self, resource_id: str, required_credentials, rap_tno: int, reason: str):
        creds = list(required_credentials)
        header = '{} resource="{}", required_credentials="{}", rap_Tno="{}"'.format(
            TRAP_SCHEME, resource_id, " ".join(creds), rap_tno
        )
        super().__init__(
            reason,
            headers={"WWW-Authenticate": header},
            resource_id=resource_id,
            required_credentials=creds,
            rap_Tno=rap_tno,
            reason=reason,
        )
        self.resource_id = resource_id
        self.required_credentials = tuple(creds)
        self.rap_Tno = rap_tno
        self.reason = reason


class Forbidden(GatewayError):
    status = 403
    code = "forbidden"


class PolicyMismatchError(GatewayError):
    status = 403
    code = "policy_mismatch"


class NotFound(GatewayError):
    status = 404
    code = "unknown_resource"


class NoPendingTrapError(GatewayError):
    status = 409
    code = "no_pending_trap"


class MalformedPolicyError(GatewayError):
    status = 400
    code = "malformed_policy"


@dataclass(frozen=True)
class TokenResponse:
    access_token: str
    expires_in: float
    token_type: str = "Bearer"
    rap_Tno: int | None = None

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "access_token": self.access_token,
            "token_type": self.token_type,
            "expires_in": self.expires_in,
        }
        if self.rap_Tno is not None:
            doc["rap_Tno"] = self.rap_Tno
        return doc


@dataclass(frozen=True)
class ProtectedResource:
    resource_id: str
    content: Any
    sensitivity: str

    def to_document(self) -> dict[str, Any]:
        return {"resource_id": self.resource_id, "content": self.content, "sensitivity": self.sensitivity}


_ENV_OVERRIDES = {
    "RAPGATE_LISTEN": "listen",
    "RAPGATE_KEYSET": "keyset_path",
    "RAPGATE_POLICY_DB": "policy_db_path",
    "RAPGATE_AUDIT_SINK": "audit_sink_path",
    "RAPGATE_IDENTITIES": "identities_path",
}
_PATH_FIELDS = ("keyset_path", "policy_db_path", "audit_sink_path", "identities_path")


@dataclass
class GatewayConfig:
    listen: str = "127.0.0.1:8080"
    token_ttl: float = 300.0
    clock_skew: float = 30.0
    keyset_path: Path | None = None
    policy_db_path: Path | None = None
    audit_sink_path: Path | None = None
    identities_path: Path | None = None
    trap_timeout: float = 300.0
    deny_threshold: int = 5
    risk_window: float = 300.0
    admin_key: str | None = None
    issuer: str = "rapgate"
    audience: str = "rapgate-clients"
    resources: dict[str, Any] = field(default_factory=dict)
    policy_cache_ttl: float | None = None
    password_iterations: int = DEFAULT_ITERATIONS
    fsync_audit: bool = False

    def __post_init__(self):
        if self.token_ttl <= 0:
            raise ValueError("token_ttl must be positive")
        if self.clock_skew < 0 or self.trap_timeout <= 0:
            raise ValueError("clock_skew must be >= 0 and trap_timeout > 0")
        for name in _PATH_FIELDS:
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, Path(value))

    @property
    def host(self) -> str:
        return self.listen.rpartition(":")[0] or "127.0.0.1"

    @property
    def port(self) -> int:
        return int(self.listen.rpartition(":")[2])

    @classmethod
    def from_document(cls, doc: Mapping[str, Any], base: Path | None = None, env: Mapping[str, str] | None = None) -> "GatewayConfig":
        values = dict(doc)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        for var, name in _ENV_OVERRIDES.items():
            if env and env.get(var):
                values[name] = env[var]
        if base is not None:
            for name in _PATH_FIELDS:
                if values.get(name) is not None:
                    values[name] = base / Path(values[name])
        return cls(**values)

    @classmethod
    def load(cls, path: str | os.PathLike, env: Mapping[str, str] | None = os.environ) -> "GatewayConfig":
        path = Path(path)
        return cls.from_document(json.loads(path.read_text()), base=path.parent, env=env)


class Gateway:
    def __init__(
        self,
        store: PolicyStore,
        identities: IdentityStore,
        keyset: KeySet,
        monitor: pam.ActivityMonitor | None = None,
        clock=None,
        ttl: float = 300.0,
        skew: float = 30.0,
        trap_timeout: float = 300.0,
        admin_key: str | None = None,
        resources: Mapping[str, Any] | None = None,
        issuer: str = "rapgate",
        audience: str = "rapgate-clients",
        alg_allowlist=DEFAULT_ALG_ALLOWLIST,
    ):
        self.clock = clock or SystemClock()
        self.store = store
        self.identities = identities
        self.keyset = keyset
        self.monitor = monitor if monitor is not None else pam.ActivityMonitor(clock=self.clock)
        self.ttl = ttl
        self.skew = skew
        self.admin_key = admin_key
        self.resources = dict(resources or {})
        self.issuer = issuer
        self.audience = audience
        self.alg_allowlist = frozenset(alg_allowlist)
        self.control = PolicyControl(
            store, identities, keyset, self.monitor, ttl=ttl, trap_timeout=trap_timeout, issuer=issuer, audience=audience,
            skew=skew,
        )
        self.gate = PolicyMatchGate(store, self.monitor, on_trap=self.control.register_trap)
        store.subscribe(self.monitor.on_policy_change)
        self.verified_requests = 0
        self._rs_secret = os.urandom(32)
        self._rs_cache: dict[str, tuple[str, bytes]] = {}
        self.control.restore_blacklist(self.monitor.records, self.clock.now())

    @classmethod
    def from_config(cls, config: GatewayConfig, clock=None) -> "Gateway":
        clock = clock or SystemClock()
        if config.keyset_path is None or config.identities_path is None:
            raise ValueError("config needs keyset_path and identities_path")
        store = PolicyStore(PolicyDatabase(config.policy_db_path), ttl=config.policy_cache_ttl, clock=clock)
        monitor = pam.ActivityMonitor(
            config.audit_sink_path,
            clock=clock,
            deny_threshold=config.deny_threshold,
            risk_window=config.risk_window,
            fsync=config.fsync_audit,
        )
        return cls(
            store,
            IdentityStore.load(config.identities_path, iterations=config.password_iterations),
            KeySet.load(config.keyset_path),
            monitor,
            clock=clock,
            ttl=config.token_ttl,
            skew=config.clock_skew,
            trap_timeout=config.trap_timeout,
            admin_key=config.admin_key,
            resources=config.resources,
            issuer=config.issuer,
            audience=config.audience,
        )

    def close(self) -> None:
        self.monitor.close()

    # authentication: resource server, then authorization server, then identity provider

    def _rs_mac(self, creds: AuthCredentials) -> bytes:
        material = json.dumps([creds.username, creds.password, creds.location_id, creds.ip_address])
        return hmac.new(self._rs_secret, material.encode(), hashlib.sha256).digest()

    def _rs_verify(self, creds: AuthCredentials) -> bool:
        cached = self._rs_cache.get(creds.username)
        rec = self.identities.get(creds.username)
        if cached is None or rec is None or not rec.registered or cached[0] != rec.password_verifier:
            return False
        return hmac.compare_digest(cached[1], self._rs_mac(creds))

    def _as_verify(self, creds: AuthCredentials) -> bool:
        if not self.identities.check(creds):
            return False
        self._rs_cache[creds.username] = (self.identities.get(creds.username).password_verifier, self._rs_mac(creds))
        return True

    def _idp_verify(self, creds: AuthCredentials) -> None:
        rec = self.identities.get(creds.username)
        if rec is None or not rec.registered:
            raise RegistrationRequired(f"user {creds.username!r} must register with the identity provider")
        raise Unauthorized("invalid credentials", code="unauthorized")

    def authenticate(self, credentials: AuthCredentials | Mapping[str, Any]) -> TokenResponse:
        """Exchange credentials for an access token bound to every resource they currently open.

        A resource is bound when the subject's roles permit some action on it
        and the supplied credentials cover its policy's required fields.
        """
        creds = _as_credentials(credentials)
        if not (self._rs_verify(creds) or self._as_verify(creds)):
            self._idp_verify(creds)
        now = self.clock.now()
        roles = self.identities.get(creds.username).roles
        supplied = creds.supplied_fields()
        bound = []
        for rid in self.store.resource_ids():
            policy = self.store.get_policy(rid)
            if policy.permitted_actions(roles) and set(policy.required_credentials) <= supplied:
                bound.append(policy)
        gar = {p.resource_id: p.permitted_actions(roles) for p in bound}
        token = mint_access_token(
            creds.username, gar, bound, self.ttl, self.keyset.active, now, issuer=self.issuer, audience=self.audience
        )
        payload = verify_token(token, self.keyset, self.alg_allowlist, now, self.skew)
        self.monitor.record(
            pam.TOKEN_ISSUED,
            subject=creds.username,
            jti=payload.jti,
            reason="authenticate",
            stage="control",
            detail={
                "token_ref": token_fingerprint(token),
                "expires_at": payload.exp,
                "bindings": {b.resource_id: b.rap_Tno for b in payload.rapID},
            },
            timestamp=now,
        )
        return TokenResponse(token, self.ttl)

    # resource access

    def _verify(self, token: Any, now: float, resource_id: str | None = None, action: str | None = None, log: bool = True) -> TokenPayload:
        try:
            payload = verify_token(
                token, self.keyset, self.alg_allowlist, now, self.skew, audience=self.audience, issuer=self.issuer
            )
        except TokenError as exc:
            if log:
                self.monitor.record(
                    pam.REJECTED, resource_id=resource_id, action=action, reason=exc.code, stage="verify", timestamp=now
                )
            raise Unauthorized(exc.code) from None
        if isinstance(token, (bytes, bytearray)):
            token = bytes(token).decode("ascii")
        if self.control.blacklist.is_blacklisted(token_fingerprint(token), now):
            if log:
                self.monitor.record(
                    pam.REJECTED,
                    subject=payload.sub,
                    resource_id=resource_id,
                    action=action,
                    jti=payload.jti,
                    reason="token_revoked",
                    stage="blacklist",
                    timestamp=now,
                )
            raise Unauthorized("token_revoked")
        self.verified_requests += 1
        return payload

    def token_accepted(self, token: Any) -> bool:
        """Whether ``token`` would pass verification and the blacklist check right now. Not logged."""
        try:
            self._verify(token, self.clock.now(), log=False)
        except Unauthorized:
            return False
        self.verified_requests -= 1
        return True

    def access_resource(self, token: Any, resource_id: str, action: str = "GET") -> ProtectedResource:
        if action not in ACTIONS:
            raise BadRequest(f"unsupported action {action!r}")
        now = self.clock.now()
        payload = self._verify(token, now, resource_id, action)
        try:
            decision = self.gate.check(AccessRequest(payload.sub, resource_id, action, payload, now))
        except UnknownResource:
            raise NotFound(f"unknown resource {resource_id!r}") from None
        if decision.outcome is Outcome.ALLOW:
            policy_sensitivity = self.store.get_policy(resource_id).sensitivity
            content = self.resources.get(resource_id, f"content of {resource_id}")
            return ProtectedResource(resource_id, content, policy_sensitivity)
        if decision.outcome is Outcome.TRAP:
            raise TrapChallenge(resource_id, decision.required_credentials, decision.policy_version_seen, decision.reason)
        raise Forbidden(decision.reason, code="forbidden")

    def refresh_after_trap(
        self, token: Any, resource_id: str, credentials: AuthCredentials | Mapping[str, Any]
    ) -> TokenResponse:
        """Answer a trap: validate the credentials and re-issue under the same jti.

        The policy is pinned while validating and signing, so the new token
        binds the version current at issue time.
        """
        creds = _as_credentials(credentials)
        now = self.clock.now()
        payload = self._verify(token, now, log=False)
        if isinstance(token, (bytes, bytearray)):
            token = bytes(token).decode("ascii")
        try:
            with self.control.token_lock(payload.jti), self.store.pinned(resource_id) as policy:
                if self.control.pending_trap(payload.jti, resource_id, now) is None:
                    raise NoPendingTrapError(f"no pending trap for this token on {resource_id!r}")
                resolution = TrapResolution(payload.jti, resource_id, creds, now)
                if not self.control.validate_trap_response(payload, resolution, policy):
                    problem = self.control.trap_response_problem(payload, resolution, policy)
                    self.monitor.record(
                        pam.TRAP_REJECTED,
                        subject=payload.sub,
                        resource_id=resource_id,
                        jti=payload.jti,
                        policy_version=policy.rap_Tno,
                        reason=problem,
                        stage="refresh",
                        timestamp=now,
                    )
                    if problem == pcm.PolicyMismatch.code:
                        raise PolicyMismatchError(
                            "credentials do not cover the policy requirements",
                            required_credentials=list(policy.required_credentials),
                        )
                    raise Unauthorized("invalid credentials", code="unauthorized")
                new_token = self.control.reissue_token(payload, resource_id, policy, now, old_token=token)
        except UnknownResource:
            raise NotFound(f"unknown resource {resource_id!r}") from None
        except pcm.Unauthorized as exc:
            raise Unauthorized(str(exc)) from None
        return TokenResponse(new_token, self.ttl, rap_Tno=policy.rap_Tno)

    # admin interface

    def _check_admin(self, admin_key: str | None) -> None:
        if not self.admin_key or not admin_key or not hmac.compare_digest(admin_key.encode(), self.admin_key.encode()):
            raise Unauthorized("admin credential required", code="unauthorized")

    def admin_update_policy(self, resource_id: str, document: Any, admin_key: str | None) -> int:
        self._check_admin(admin_key)
        if resource_id not in self.store.db:
            raise NotFound(f"unknown resource {resource_id!r}")
        try:
            if not isinstance(document, Mapping):
                raise MalformedPolicy("policy document must be an object")
            if document.get("resource_id", resource_id) != resource_id:
                raise MalformedPolicy("resource_id in body does not match path")
            if "rules" not in document:
                raise MalformedPolicy("policy document needs rules")
            rules = parse_rules(document["rules"])
            creds = document.get("required_credentials", ["username", "password"])
            if not isinstance(creds, list):
                raise MalformedPolicy("required_credentials must be a list")
            creds = normalize_credentials(creds)
            sensitivity = document.get("sensitivity")
            if sensitivity is not None and sensitivity not in ("sensitive", "non_sensitive"):
                raise MalformedPolicy(f"bad sensitivity {sensitivity!r}")
        except MalformedPolicy as exc:
            raise MalformedPolicyError(str(exc)) from None
        try:
            policy = self.store.update_policy(resource_id, rules, creds, self.clock.now(), sensitivity=sensitivity)
        except UnknownResource:
            raise NotFound(f"unknown resource {resource_id!r}") from None
        return policy.rap_Tno

    def admin_audit(self, admin_key: str | None, **filters) -> list[pam.ActivityRecord]:
        self._check_admin(admin_key)
        return self.monitor.audit(**filters)


def _as_credentials(credentials: AuthCredentials | Mapping[str, Any]) -> AuthCredentials:
    if isinstance(credentials, AuthCredentials):
        return credentials
    try:
        return AuthCredentials.from_mapping(credentials)
    except (ValueError, TypeError) as exc:
        raise BadRequest(str(exc)) from None
