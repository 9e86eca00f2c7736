"""Versioned resource access policies: the policy database, its in-memory proxy cache, and the archive."""

from __future__ import annotations

import json
import os
import re
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping

from rapgate.tokens import ACTIONS, CREDENTIAL_FIELDS

SENSITIVITIES = ("sensitive", "non_sensitive")
BASE_CREDENTIALS = frozenset({"username", "password"})
_RESOURCE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]{0,127}$")


class PolicyError(Exception):
    code = "policy_error"


class UnknownResource(PolicyError):
    code = "unknown_resource"


class UnknownVersion(PolicyError):
    code = "unknown_version"


class MalformedPolicy(PolicyError):
    code = "malformed_policy"


@dataclass(frozen=True)
class AccessRule:
    action: str
    allowed_roles: tuple[str, ...]
    allow: bool = True

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise MalformedPolicy(f"unknown action {self.action!r}")
        object.__setattr__(self, "allowed_roles", tuple(self.allowed_roles))

    def to_document(self) -> dict[str, Any]:
        return {"action": self.action, "allowed_roles": list(self.allowed_roles), "allow": self.allow}

    @classmethod
    def from_document(cls, doc: Any) -> "AccessRule":
        if not isinstance(doc, dict):
            raise MalformedPolicy("rule must be an object")
        roles = doc.get("allowed_roles", [])
        allow = doc.get("allow", True)
        if not isinstance(roles, list) or not all(isinstance(r, str) for r in roles):
            raise MalformedPolicy("allowed_roles must be a list of strings")
        if not isinstance(allow, bool):
            raise MalformedPolicy("allow must be a boolean")
        return cls(action=doc.get("action"), allowed_roles=tuple(roles), allow=allow)


def parse_rules(docs: Any) -> tuple[AccessRule, ...]:
    if not isinstance(docs, list):
        raise MalformedPolicy("rules must be a list")
    rules = tuple(AccessRule.from_document(d) for d in docs)
    actions = [r.action for r in rules]
    if len(actions) != len(set(actions)):
        raise MalformedPolicy("at most one rule per action")
    return rules


def normalize_credentials(fields: Iterable[str]) -> tuple[str, ...]:
    fields = set(fields)
    if not all(isinstance(f, str) for f in fields) or not fields <= CREDENTIAL_FIELDS:
        raise MalformedPolicy(f"unknown credential fields {sorted(map(str, fields - CREDENTIAL_FIELDS))}")
    return tuple(sorted(fields | BASE_CREDENTIALS))


@dataclass(frozen=True)
class ResourceAccessPolicy:
    resource_id: str
    rap_Tno: int
    rap_iat: float
    sensitivity: str
    required_credentials: tuple[str, ...]
    rules: tuple[AccessRule, ...]

    def __post_init__(self):
        if not isinstance(self.resource_id, str) or not _RESOURCE_ID.match(self.resource_id):
            raise MalformedPolicy(f"bad resource id {self.resource_id!r}")
        if self.sensitivity not in SENSITIVITIES:
            raise MalformedPolicy(f"bad sensitivity {self.sensitivity!r}")
        if not isinstance(self.rap_Tno, int) or self.rap_Tno < 0:
            raise MalformedPolicy("rap_Tno must be a non-negative integer")
        object.__setattr__(self, "required_credentials", normalize_credentials(self.required_credentials))
        rules = tuple(self.rules)
        if len({r.action for r in rules}) != len(rules):
            raise MalformedPolicy("at most one rule per action")
        object.__setattr__(self, "rules", rules)

    def rule_for(self, action: str) -> AccessRule | None:
        for rule in self.rules:
            if rule.action == action:
                return rule
        return None

    def permitted_actions(self, roles: Iterable[str]) -> tuple[str, ...]:
        roles = set(roles)
        return tuple(r.action for r in self.rules if r.allow and roles & set(r.allowed_roles))

    def to_document(self) -> dict[str, Any]:
        return {
            "resource_id": self.resource_id,
            "rap_Tno": self.rap_Tno,
            "rap_iat": self.rap_iat,
            "sensitivity": self.sensitivity,
            "required_credentials": list(self.required_credentials),
            "rules": [r.to_document() for r in self.rules],
        }

    @classmethod
    def from_document(cls, doc: Any) -> "ResourceAccessPolicy":
        if not isinstance(doc, dict):
            raise MalformedPolicy("policy document must be an object")
        try:
            creds = doc.get("required_credentials", ["username", "password"])
            if not isinstance(creds, list):
                raise MalformedPolicy("required_credentials must be a list")
            return cls(
                resource_id=doc["resource_id"],
                rap_Tno=doc.get("rap_Tno", 0),
                rap_iat=float(doc.get("rap_iat", 0.0)),
                sensitivity=doc.get("sensitivity", "non_sensitive"),
                required_credentials=tuple(creds),
                rules=parse_rules(doc.get("rules", [])),
            )
        except KeyError as exc:
            raise MalformedPolicy(f"missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise MalformedPolicy(str(exc)) from None


@dataclass(frozen=True)
class PolicyArchiveEntry:
    resource_id: str
    policy: ResourceAccessPolicy
    archived_at: float


@dataclass(frozen=True)
class CacheEntry:
    resource_id: str
    policy: ResourceAccessPolicy
    inserted_at: float


class PolicyDatabase:
    """The authoritative policy store.

    With a ``path`` it is a directory holding one ``<resource_id>.json``
    document per resource (rewritten atomically on change) and an
    ``archive/<resource_id>.jsonl`` file of superseded versions. Without a
    path everything lives in memory. ``reads`` counts every ``read`` call.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.reads = 0
        self._docs: dict[str, ResourceAccessPolicy] = {}
        self._archive: dict[str, list[PolicyArchiveEntry]] = {}
        self._lock = threading.Lock()
        if self.path is not None:
            self._load()

    def _load(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        for doc_path in sorted(self.path.glob("*.json")):
            policy = ResourceAccessPolicy.from_document(json.loads(doc_path.read_text()))
            if doc_path.stem != policy.resource_id:
                raise MalformedPolicy(f"{doc_path.name} holds policy for {policy.resource_id}")
            self._docs[policy.resource_id] = policy
            entries = []
            archive = self.path / "archive" / f"{policy.resource_id}.jsonl"
            if archive.exists():
                for line in archive.read_text().splitlines():
                    if line.strip():
                        rec = json.loads(line)
                        entries.append(
                            PolicyArchiveEntry(
                                policy.resource_id,
                                ResourceAccessPolicy.from_document(rec["policy"]),
                                rec["archived_at"],
                            )
                        )
            self._archive[policy.resource_id] = entries

    def resource_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._docs)

    def __contains__(self, resource_id: str) -> bool:
        with self._lock:
            return resource_id in self._docs

    def read(self, resource_id: str) -> ResourceAccessPolicy:
        with self._lock:
            self.reads += 1
            try:
                return self._docs[resource_id]
            except KeyError:
                raise UnknownResource(resource_id) from None

    def write(self, policy: ResourceAccessPolicy, archived_at: float | None = None) -> None:
        """Store ``policy`` as current; the version it replaces goes to the archive."""
        with self._lock:
            old = self._docs.get(policy.resource_id)
            if self.path is not None:
                if old is not None:
                    arch_dir = self.path / "archive"
                    arch_dir.mkdir(exist_ok=True)
                    with open(arch_dir / f"{policy.resource_id}.jsonl", "a") as fh:
                        fh.write(json.dumps({"policy": old.to_document(), "archived_at": archived_at}) + "\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                _atomic_write(self.path / f"{policy.resource_id}.json", policy.to_document())
            if old is not None:
                self._archive.setdefault(policy.resource_id, []).append(
                    PolicyArchiveEntry(policy.resource_id, old, archived_at)
                )
            else:
                self._archive.setdefault(policy.resource_id, [])
            self._docs[policy.resource_id] = policy

    def archive(self, resource_id: str) -> list[PolicyArchiveEntry]:
        with self._lock:
            if resource_id not in self._docs:
                raise UnknownResource(resource_id)
            return list(self._archive.get(resource_id, []))


def _atomic_write(target: Path, doc: Mapping[str, Any]) -> None:
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _RWLock:
    """Writer-preferring readers/writer lock."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


PolicyListener = Callable[[ResourceAccessPolicy], None]


class PolicyStore:
    """Policy reads through an in-memory proxy cache with write-through invalidation.

    Updates to one resource are serialized and exclude readers of that
    resource, so a reader sees either the old or the new snapshot. The cache
    entry is evicted and every listener notified before ``update_policy``
    returns. ``ttl`` (seconds, default none) additionally ages out entries.
    """

    def __init__(self, db: PolicyDatabase | None = None, ttl: float | None = None, clock=None):
        self.db = db if db is not None else PolicyDatabase()
        self.ttl = ttl
        self.clock = clock
        self.hits = 0
        self.misses = 0
        self._cache: dict[str, CacheEntry] = {}
        self._cache_lock = threading.Lock()
        self._locks: dict[str, _RWLock] = {}
        self._locks_guard = threading.Lock()
        self._listeners: list[PolicyListener] = []

    def subscribe(self, listener: PolicyListener) -> None:
        self._listeners.append(listener)

    def _rw(self, resource_id: str) -> _RWLock:
        with self._locks_guard:
            lock = self._locks.get(resource_id)
            if lock is None:
                lock = self._locks[resource_id] = _RWLock()
            return lock

    def _now(self) -> float:
        return self.clock.now() if self.clock is not None else 0.0

    def _cached_or_load(self, resource_id: str) -> ResourceAccessPolicy:
        with self._cache_lock:
            entry = self._cache.get(resource_id)
            if entry is not None and (self.ttl is None or self._now() - entry.inserted_at < self.ttl):
                self.hits += 1
                return entry.policy
            self.misses += 1
        policy = self.db.read(resource_id)
        with self._cache_lock:
            self._cache[resource_id] = CacheEntry(resource_id, policy, self._now())
        return policy

    def get_policy(self, resource_id: str) -> ResourceAccessPolicy:
        with self._rw(resource_id).read():
            return self._cached_or_load(resource_id)

    @contextmanager
    def pinned(self, resource_id: str) -> Iterator[ResourceAccessPolicy]:
        """Yield the current policy and hold off updates to it until the block exits."""
        with self._rw(resource_id).read():
            yield self._cached_or_load(resource_id)

    def resource_ids(self) -> list[str]:
        return self.db.resource_ids()

    def cached(self, resource_id: str) -> CacheEntry | None:
        with self._cache_lock:
            return self._cache.get(resource_id)

    def create_policy(
        self,
        resource_id: str,
        rules: Iterable[AccessRule],
        required_credentials: Iterable[str] = ("username", "password"),
        sensitivity: str = "non_sensitive",
        now: float = 0.0,
    ) -> ResourceAccessPolicy:
        with self._rw(resource_id).write():
            if resource_id in self.db:
                raise MalformedPolicy(f"resource {resource_id!r} already exists")
            policy = ResourceAccessPolicy(
                resource_id, 0, now, sensitivity, tuple(required_credentials), tuple(rules)
            )
            self.db.write(policy)
            return policy

    def update_policy(
        self,
        resource_id: str,
        new_rules: Iterable[AccessRule],
        new_required_credentials: Iterable[str],
        now: float,
        sensitivity: str | None = None,
    ) -> ResourceAccessPolicy:
        with self._rw(resource_id).write():
            old = self.db.read(resource_id)
            policy = ResourceAccessPolicy(
                resource_id=resource_id,
                rap_Tno=old.rap_Tno + 1,
                rap_iat=max(now, old.rap_iat),
                sensitivity=sensitivity or old.sensitivity,
                required_credentials=tuple(new_required_credentials),
                rules=tuple(new_rules),
            )
            self.db.write(policy, archived_at=now)
            with self._cache_lock:
                self._cache.pop(resource_id, None)
            for listener in self._listeners:
                listener(policy)
            return policy

    def archive(self, resource_id: str) -> list[PolicyArchiveEntry]:
        return self.db.archive(resource_id)

    def get_archived(self, resource_id: str, version: int) -> ResourceAccessPolicy:
        for entry in self.db.archive(resource_id):
            if entry.policy.rap_Tno == version:
                return entry.policy
        raise UnknownVersion(f"{resource_id} has no archived version {version}")
