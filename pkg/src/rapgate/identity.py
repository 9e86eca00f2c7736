"""In-process identity provider: registered users with salted password verifiers."""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

DEFAULT_ITERATIONS = 100_000


def hash_password(password: str, iterations: int = DEFAULT_ITERATIONS, salt: bytes | None = None) -> str:
    salt = salt if salt is not None else os.urandom(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return "pbkdf2_sha256${}${}${}".format(
        iterations, base64.b64encode(salt).decode(), base64.b64encode(digest).decode()
    )


def verify_password(password: str, verifier: str) -> bool:
    try:
        scheme, iterations, salt, digest = verifier.split("$")
    except ValueError:
        return False
    if scheme != "pbkdf2_sha256":
        return False
    candidate = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), base64.b64decode(salt), int(iterations))
    return hmac.compare_digest(candidate, base64.b64decode(digest))


@dataclass(frozen=True)
class IdentityRecord:
    username: str
    password_verifier: str = field(repr=False)
    roles: tuple[str, ...] = ()
    registered: bool = True
    location_id: str | None = None
    ip_address: str | None = None


class IdentityStore:
    """Username -> IdentityRecord. Passwords are only ever held as verifiers."""

    def __init__(self, records: Iterable[IdentityRecord] = ()):
        self._records: dict[str, IdentityRecord] = {}
        self._lock = threading.Lock()
        for rec in records:
            self.add(rec)

    def add(self, record: IdentityRecord) -> None:
        with self._lock:
            if record.username in self._records:
                raise ValueError(f"duplicate username {record.username!r}")
            self._records[record.username] = record

    def register(
        self,
        username: str,
        password: str,
        roles: Iterable[str] = (),
        location_id: str | None = None,
        ip_address: str | None = None,
        iterations: int = DEFAULT_ITERATIONS,
        registered: bool = True,
    ) -> IdentityRecord:
        rec = IdentityRecord(
            username=username,
            password_verifier=hash_password(password, iterations),
            roles=tuple(roles),
            registered=registered,
            location_id=location_id,
            ip_address=ip_address,
        )
        self.add(rec)
        return rec

    def get(self, username: str) -> IdentityRecord | None:
        with self._lock:
            return self._records.get(username)

    def __contains__(self, username: str) -> bool:
        return self.get(username) is not None

    def check_password(self, username: str, password: str | None) -> bool:
        rec = self.get(username)
        if rec is None or not rec.registered or not password:
            return False
        return verify_password(password, rec.password_verifier)

    def check(self, credentials) -> bool:
        """True iff every supplied credential field matches the registered identity.

        An optional field the identity has no expected value for cannot be
        verified and fails the check.
        """
        rec = self.get(credentials.username)
        if rec is None or not self.check_password(credentials.username, credentials.password):
            return False
        for name in ("location_id", "ip_address"):
            supplied = getattr(credentials, name)
            if supplied is None:
                continue
            expected = getattr(rec, name)
            if expected is None or not hmac.compare_digest(supplied.encode(), expected.encode()):
                return False
        return True

    @classmethod
    def load(cls, path: str | os.PathLike, iterations: int = DEFAULT_ITERATIONS) -> "IdentityStore":
        """Load ``{"users": [...]}``; entries give ``password_hash`` or a seed ``password``."""
        doc = json.loads(Path(path).read_text())
        store = cls()
        for entry in doc["users"]:
            verifier = entry.get("password_hash") or hash_password(entry["password"], iterations)
            store.add(
                IdentityRecord(
                    username=entry["username"],
                    password_verifier=verifier,
                    roles=tuple(entry.get("roles", ())),
                    registered=entry.get("registered", True),
                    location_id=entry.get("location_id"),
                    ip_address=entry.get("ip_address"),
                )
            )
        return store

    def to_document(self) -> dict[str, Any]:
        with self._lock:
            return {
                "users": [
                    {
                        "username": r.username,
                        "password_hash": r.password_verifier,
                        "roles": list(r.roles),
                        "registered": r.registered,
                        "location_id": r.location_id,
                        "ip_address": r.ip_address,
                    }
                    for r in self._records.values()
                ]
            }
