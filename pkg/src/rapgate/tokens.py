"""Extended JWT: compact HS256 serialization with a ``rapID`` policy-binding claim.

The compact form is ``b64url(header) "." b64url(payload) "." b64url(mac)``
with unpadded base64url and canonical JSON (sorted keys, no whitespace), so
the signing input for a given header/payload is byte-for-byte reproducible.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import os
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

CREDENTIAL_FIELDS = frozenset({"username", "password", "location_id", "ip_address"})
ACTIONS = ("GET", "POST")

SUPPORTED_ALGORITHMS = {"HS256": hashlib.sha256}
DEFAULT_ALG_ALLOWLIST = frozenset({"HS256"})
MIN_SECRET_BYTES = 32


class TokenError(Exception):
    code = "token_error"


class InvalidPayload(TokenError):
    code = "invalid_payload"


class KeyMismatch(TokenError):
    code = "key_mismatch"


class EmptyBindings(TokenError):
    code = "empty_bindings"


class Malformed(TokenError):
    code = "malformed"


class AlgRejected(TokenError):
    code = "alg_rejected"


class UnknownKid(TokenError):
    code = "unknown_kid"


class BadSignature(TokenError):
    code = "bad_signature"


class Expired(TokenError):
    code = "expired"


class NotYetValid(TokenError):
    code = "not_yet_valid"


class ClaimMismatch(TokenError):
    code = "claim_mismatch"


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(segment: str) -> bytes:
    """Strict unpadded base64url decode.

    Rejects padding, foreign characters and non-canonical trailing bits, so
    every distinct segment string decodes to distinct bytes.
    """
    if "=" in segment or len(segment) % 4 == 1:
        raise Malformed("bad base64url segment length or padding")
    try:
        raw = base64.b64decode(
            segment + "=" * (-len(segment) % 4), altchars=b"-_", validate=True
        )
    except (binascii.Error, ValueError) as exc:
        raise Malformed(f"bad base64url segment: {exc}") from None
    if b64url_encode(raw) != segment:
        raise Malformed("non-canonical base64url segment")
    return raw


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True)
class TokenHeader:
    alg: str
    kid: str | None
    typ: str = "JWT"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"alg": self.alg, "typ": self.typ}
        if self.kid is not None:
            out["kid"] = self.kid
        return out

    @classmethod
    def from_dict(cls, obj: Any) -> "TokenHeader":
        if not isinstance(obj, dict) or not isinstance(obj.get("alg"), str):
            raise Malformed("header must be an object with a string alg")
        if obj.get("typ") != "JWT":
            raise Malformed("header typ must be JWT")
        kid = obj.get("kid")
        if kid is not None and not isinstance(kid, str):
            raise Malformed("header kid must be a string")
        return cls(alg=obj["alg"], kid=kid, typ="JWT")


@dataclass(frozen=True)
class RapIdBinding:
    """One resource's policy binding inside a token's ``rapID`` claim."""

    resource_id: str
    rap_iat: float
    rap_Tno: int
    rap_V: bool
    rap_reqC: tuple[str, ...]
    rap_jti: str

    def __post_init__(self):
        object.__setattr__(self, "rap_reqC", tuple(sorted(set(self.rap_reqC))))

    def to_claim(self) -> dict[str, Any]:
        return {
            "resource_id": self.resource_id,
            "rap_iat": self.rap_iat,
            "rap_Tno": self.rap_Tno,
            "rap_V": self.rap_V,
            "rap_reqC": list(self.rap_reqC),
            "rap_jti": self.rap_jti,
        }

    @classmethod
    def from_claim(cls, obj: Any) -> "RapIdBinding":
        if not isinstance(obj, dict):
            raise Malformed("rapID entries must be objects")
        try:
            resource_id, rap_iat, rap_tno = obj["resource_id"], obj["rap_iat"], obj["rap_Tno"]
            rap_v, req, rap_jti = obj["rap_V"], obj["rap_reqC"], obj["rap_jti"]
        except KeyError as exc:
            raise Malformed(f"rapID entry missing {exc}") from None
        if not (
            isinstance(resource_id, str)
            and _is_number(rap_iat)
            and isinstance(rap_tno, int)
            and not isinstance(rap_tno, bool)
            and isinstance(rap_v, bool)
            and isinstance(req, list)
            and all(isinstance(r, str) for r in req)
            and isinstance(rap_jti, str)
        ):
            raise Malformed("rapID entry has wrongly typed fields")
        return cls(resource_id, rap_iat, rap_tno, rap_v, tuple(req), rap_jti)


@dataclass(frozen=True)
class TokenPayload:
    iss: str
    sub: str
    aud: str
    exp: float
    iat: float
    jti: str
    rapID: tuple[RapIdBinding, ...] = ()
    gar: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    nbf: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "rapID", tuple(self.rapID))
        object.__setattr__(
            self, "gar", {r: tuple(sorted(set(a))) for r, a in sorted(self.gar.items())}
        )

    def binding_for(self, resource_id: str) -> RapIdBinding | None:
        for binding in self.rapID:
            if binding.resource_id == resource_id:
                return binding
        return None

    def check(self) -> None:
        """Raise InvalidPayload unless every payload invariant holds."""
        if not self.jti:
            raise InvalidPayload("jti must be non-empty")
        if self.iat > self.exp:
            raise InvalidPayload("iat after exp")
        if self.nbf is not None and self.nbf > self.exp:
            raise InvalidPayload("nbf after exp")
        seen = set()
        for b in self.rapID:
            if b.resource_id in seen:
                raise InvalidPayload(f"duplicate binding for {b.resource_id}")
            seen.add(b.resource_id)
            if b.rap_jti != self.jti:
                raise InvalidPayload("rap_jti differs from jti")
            if b.rap_Tno < 0:
                raise InvalidPayload("rap_Tno must be non-negative")
            if not set(b.rap_reqC) <= CREDENTIAL_FIELDS:
                raise InvalidPayload(f"unknown credential fields in {b.rap_reqC}")
        for actions in self.gar.values():
            if not set(actions) <= set(ACTIONS):
                raise InvalidPayload(f"unknown actions in {actions}")

    def to_claims(self) -> dict[str, Any]:
        claims: dict[str, Any] = {
            "iss": self.iss,
            "sub": self.sub,
            "aud": self.aud,
            "exp": self.exp,
            "iat": self.iat,
            "jti": self.jti,
            "rapID": [b.to_claim() for b in self.rapID],
            "gar": {r: list(a) for r, a in self.gar.items()},
        }
        if self.nbf is not None:
            claims["nbf"] = self.nbf
        return claims

    @classmethod
    def from_claims(cls, obj: Any) -> "TokenPayload":
        if not isinstance(obj, dict):
            raise Malformed("payload must be an object")
        for name in ("iss", "sub", "aud", "jti"):
            if not isinstance(obj.get(name), str):
                raise Malformed(f"claim {name} must be a string")
        for name in ("exp", "iat"):
            if not _is_number(obj.get(name)):
                raise Malformed(f"claim {name} must be numeric")
        nbf = obj.get("nbf")
        if nbf is not None and not _is_number(nbf):
            raise Malformed("claim nbf must be numeric")
        rap = obj.get("rapID", [])
        gar = obj.get("gar", {})
        if not isinstance(rap, list) or not isinstance(gar, dict):
            raise Malformed("rapID must be a list and gar an object")
        for actions in gar.values():
            if not isinstance(actions, list) or not all(isinstance(a, str) for a in actions):
                raise Malformed("gar values must be lists of action names")
        return cls(
            iss=obj["iss"],
            sub=obj["sub"],
            aud=obj["aud"],
            exp=obj["exp"],
            iat=obj["iat"],
            jti=obj["jti"],
            rapID=tuple(RapIdBinding.from_claim(b) for b in rap),
            gar=gar,
            nbf=nbf,
        )


@dataclass(frozen=True)
class SigningKey:
    kid: str
    secret: bytes = field(repr=False)
    algorithm: str = "HS256"

    def __post_init__(self):
        if self.algorithm not in SUPPORTED_ALGORITHMS:
            raise ValueError(f"unsupported algorithm {self.algorithm!r}")
        if len(self.secret) < MIN_SECRET_BYTES:
            raise ValueError(f"HS256 secrets need at least {MIN_SECRET_BYTES} bytes")

    def mac(self, data: bytes) -> bytes:
        return hmac.new(self.secret, data, SUPPORTED_ALGORITHMS[self.algorithm]).digest()

    @classmethod
    def generate(cls, kid: str, algorithm: str = "HS256") -> "SigningKey":
        return cls(kid=kid, secret=os.urandom(32), algorithm=algorithm)


class KeySet:
    """Keys by kid. The first key (or the one named ``active``) signs new tokens."""

    def __init__(self, keys: Iterable[SigningKey], active: str | None = None):
        self._keys: dict[str, SigningKey] = {}
        for key in keys:
            if key.kid in self._keys:
                raise ValueError(f"duplicate kid {key.kid!r}")
            self._keys[key.kid] = key
        if not self._keys:
            raise ValueError("key set is empty")
        self.active_kid = active if active is not None else next(iter(self._keys))
        if self.active_kid not in self._keys:
            raise ValueError(f"active kid {self.active_kid!r} not in key set")

    def resolve(self, kid: str | None) -> SigningKey | None:
        if kid is None:
            return None
        return self._keys.get(kid)

    @property
    def active(self) -> SigningKey:
        return self._keys[self.active_kid]

    def __iter__(self):
        return iter(self._keys.values())

    def __len__(self) -> int:
        return len(self._keys)

    def to_document(self) -> dict[str, Any]:
        return {
            "active": self.active_kid,
            "keys": [
                {"kid": k.kid, "alg": k.algorithm, "secret": base64.b64encode(k.secret).decode()}
                for k in self._keys.values()
            ],
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "KeySet":
        keys = [
            SigningKey(kid=e["kid"], algorithm=e["alg"], secret=base64.b64decode(e["secret"]))
            for e in doc["keys"]
        ]
        return cls(keys, active=doc.get("active"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "KeySet":
        return cls.from_document(json.loads(Path(path).read_text()))

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_document(), indent=2) + "\n")


def signing_input(header: TokenHeader, payload: TokenPayload) -> str:
    return b64url_encode(canonical_json(header.to_dict())) + "." + b64url_encode(
        canonical_json(payload.to_claims())
    )


def encode_token(header: TokenHeader, payload: TokenPayload, key: SigningKey) -> str:
    if header.alg != key.algorithm or header.kid != key.kid:
        raise KeyMismatch(
            f"header ({header.alg}, {header.kid}) does not match key ({key.algorithm}, {key.kid})"
        )
    if header.typ != "JWT":
        raise InvalidPayload("typ must be JWT")
    payload.check()
    head = signing_input(header, payload)
    return head + "." + b64url_encode(key.mac(head.encode("ascii")))


def _split(compact: Any) -> tuple[str, str, str]:
    if isinstance(compact, (bytes, bytearray)):
        try:
            compact = bytes(compact).decode("ascii")
        except UnicodeDecodeError:
            raise Malformed("token is not ASCII") from None
    if not isinstance(compact, str) or not compact.isascii():
        raise Malformed("token must be an ASCII string")
    parts = compact.split(".")
    if len(parts) != 3 or not parts[0] or not parts[1]:
        raise Malformed("token must have three dot-separated segments")
    return parts[0], parts[1], parts[2]


def _parse_json(raw: bytes) -> Any:
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise Malformed("segment is not JSON") from None


def decode_token(compact: Any) -> tuple[TokenHeader, TokenPayload]:
    """Parse without verifying anything. Never trust the result."""
    h, p, s = _split(compact)
    b64url_decode(s)
    header = TokenHeader.from_dict(_parse_json(b64url_decode(h)))
    payload = TokenPayload.from_claims(_parse_json(b64url_decode(p)))
    return header, payload


_DUMMY_KEY = SigningKey(kid="\x00dummy", secret=b"\x00" * MIN_SECRET_BYTES)


def verify_token(
    compact: Any,
    keyset: KeySet | Iterable[SigningKey],
    alg_allowlist: Iterable[str] = DEFAULT_ALG_ALLOWLIST,
    now: float = 0.0,
    skew: float = 30.0,
    audience: str | None = None,
    issuer: str | None = None,
) -> TokenPayload:
    """Return the payload of ``compact`` if it satisfies the whole verification contract.

    Raises a distinct ``TokenError`` subclass per failure: Malformed,
    AlgRejected ("none" is never accepted, and the header alg must equal the
    resolved key's algorithm), UnknownKid, BadSignature, Expired, NotYetValid,
    ClaimMismatch. The MAC is always computed, even when the alg or kid checks
    have already failed.
    """
    if not isinstance(keyset, KeySet):
        keyset = KeySet(keyset)
    allow = frozenset(alg_allowlist) - {"none"}

    h, p, s = _split(compact)
    header = TokenHeader.from_dict(_parse_json(b64url_decode(h)))
    signature = b64url_decode(s)

    key = keyset.resolve(header.kid)
    alg_ok = header.alg in allow and header.alg in SUPPORTED_ALGORITHMS
    if key is not None and key.algorithm != header.alg:
        alg_ok = False
    expected = (key or _DUMMY_KEY).mac(f"{h}.{p}".encode("ascii"))
    sig_ok = hmac.compare_digest(expected, signature)

    if not alg_ok:
        raise AlgRejected(f"algorithm {header.alg!r} rejected")
    if key is None:
        raise UnknownKid(f"unknown kid {header.kid!r}")
    if not sig_ok:
        raise BadSignature("signature mismatch")

    payload = TokenPayload.from_claims(_parse_json(b64url_decode(p)))
    expired = not (now < payload.exp + skew)
    early = payload.nbf is not None and now < payload.nbf - skew
    claims_ok = all(b.rap_jti == payload.jti for b in payload.rapID)
    if audience is not None and payload.aud != audience:
        claims_ok = False
    if issuer is not None and payload.iss != issuer:
        claims_ok = False
    if expired:
        raise Expired(f"token expired at {payload.exp}")
    if early:
        raise NotYetValid(f"token not valid before {payload.nbf}")
    if not claims_ok:
        raise ClaimMismatch("rapID/jti or audience/issuer mismatch")
    return payload


def new_jti() -> str:
    return uuid.uuid4().hex


def token_fingerprint(compact: str) -> str:
    """Digest naming one compact token; distinguishes re-issues that share a jti."""
    return hashlib.sha256(compact.encode("ascii")).hexdigest()


def _binding_from(source: Any, jti: str) -> RapIdBinding:
    if isinstance(source, RapIdBinding):
        return replace(source, rap_jti=jti)
    return RapIdBinding(
        resource_id=source.resource_id,
        rap_iat=source.rap_iat,
        rap_Tno=source.rap_Tno,
        rap_V=True,
        rap_reqC=tuple(source.required_credentials),
        rap_jti=jti,
    )


def mint_access_token(
    identity: str,
    gar: Any,
    bindings: Iterable[Any],
    ttl: float,
    key: SigningKey,
    now: float,
    jti: str | None = None,
    issuer: str = "rapgate",
    audience: str = "rapgate-clients",
    allow_identity_only: bool = True,
) -> str:
    """Sign a fresh access token for ``identity``.

    ``bindings`` holds policy snapshots (anything with ``resource_id``,
    ``rap_Tno``, ``rap_iat`` and ``required_credentials``) or existing
    RapIdBinding values to carry over. ``gar`` maps resource id to permitted
    actions, or is a GrantedAccessRights. Passing ``jti`` re-issues under
    an existing id.
    """
    if ttl <= 0:
        raise InvalidPayload("ttl must be positive")
    jti = jti if jti is not None else new_jti()
    rap = tuple(_binding_from(b, jti) for b in bindings)
    if not rap and not allow_identity_only:
        raise EmptyBindings("token must bind at least one resource")
    grants = getattr(gar, "grants", gar) or {}
    bound = {b.resource_id for b in rap}
    if not set(grants) <= bound:
        raise InvalidPayload(f"gar names unbound resources {sorted(set(grants) - bound)}")
    payload = TokenPayload(
        iss=issuer,
        sub=identity,
        aud=audience,
        exp=now + ttl,
        iat=now,
        jti=jti,
        rapID=rap,
        gar={r: tuple(a) for r, a in grants.items()},
    )
    return encode_token(TokenHeader(alg=key.algorithm, kid=key.kid), payload, key)
