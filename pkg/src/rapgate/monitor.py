"""Activity monitor: append-only decision log, audits, windowed statistics, risk flags."""

from __future__ import annotations

import bisect
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

ALLOW = "Allow"
DENY = "Deny"
TRAP_REQUIRED = "TrapRequired"
TRAP_RESOLVED = "TrapResolved"
TOKEN_ISSUED = "TokenIssued"
TOKEN_BLACKLISTED = "TokenBlacklisted"
POLICY_UPDATED = "PolicyUpdated"
REJECTED = "Rejected"
TRAP_REJECTED = "TrapRejected"
RISK_FLAGGED = "RiskFlagged"

OUTCOMES = frozenset(
    {
        ALLOW,
        DENY,
        TRAP_REQUIRED,
        TRAP_RESOLVED,
        TRAP_REJECTED,
        TOKEN_ISSUED,
        TOKEN_BLACKLISTED,
        POLICY_UPDATED,
        REJECTED,
        RISK_FLAGGED,
    }
)
# outcomes that answer one access request
REQUEST_OUTCOMES = frozenset({ALLOW, DENY, TRAP_REQUIRED, REJECTED})


class SinkUnavailable(Exception):
    code = "sink_unavailable"


@dataclass(frozen=True)
class ActivityRecord:
    seq: int
    timestamp: float
    outcome: str
    subject: str | None = None
    resource_id: str | None = None
    action: str | None = None
    jti: str | None = None
    policy_version: int | None = None
    reason: str = ""
    stage: str = ""
    detail: Mapping[str, Any] = field(default_factory=dict)

    def to_document(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "outcome": self.outcome,
            "subject": self.subject,
            "resource_id": self.resource_id,
            "action": self.action,
            "jti": self.jti,
            "policy_version": self.policy_version,
            "reason": self.reason,
            "stage": self.stage,
            "detail": dict(self.detail),
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "ActivityRecord":
        return cls(
            seq=doc["seq"],
            timestamp=doc["timestamp"],
            outcome=doc["outcome"],
            subject=doc.get("subject"),
            resource_id=doc.get("resource_id"),
            action=doc.get("action"),
            jti=doc.get("jti"),
            policy_version=doc.get("policy_version"),
            reason=doc.get("reason", ""),
            stage=doc.get("stage", ""),
            detail=doc.get("detail") or {},
        )


@dataclass(frozen=True)
class RiskCounter:
    subject: str | None
    resource_id: str | None
    window: float
    trap_count: int = 0
    deny_count: int = 0
    request_count: int = 0


class ActivityMonitor:
    """Append-only activity log with an optional line-delimited JSON sink.

    Records reach the sink (written and flushed; fsynced when ``fsync`` is
    set) before ``record`` returns their sequence number. On construction an
    existing sink is replayed, so sequence numbers continue across restarts.

    Risk rule: when a subject's deny count within ``risk_window`` seconds
    reaches ``deny_threshold``, one RiskFlagged record recommends a policy
    review. Nothing is changed automatically.
    """

    def __init__(
        self,
        sink_path: str | os.PathLike | None = None,
        clock=None,
        deny_threshold: int = 5,
        risk_window: float = 300.0,
        fsync: bool = False,
    ):
        self.sink_path = Path(sink_path) if sink_path is not None else None
        self.clock = clock
        self.deny_threshold = deny_threshold
        self.risk_window = risk_window
        self.fsync = fsync
        self._lock = threading.RLock()
        self._records: list[ActivityRecord] = []
        self._times: list[float] = []
        self._monotone = True
        self._by_subject: dict[str, list[int]] = {}
        self._by_resource: dict[str, list[int]] = {}
        self._by_jti: dict[str, list[int]] = {}
        self._latest_update: dict[str, ActivityRecord] = {}
        self._fh = None
        if self.sink_path is not None:
            self._replay_sink()

    def _replay_sink(self) -> None:
        if self.sink_path.exists():
            with open(self.sink_path) as fh:
                for line in fh:
                    if line.strip():
                        self._index(ActivityRecord.from_document(json.loads(line)))
        try:
            self.sink_path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.sink_path, "a", encoding="utf-8")
        except OSError as exc:
            raise SinkUnavailable(str(exc)) from exc

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def _index(self, rec: ActivityRecord) -> None:
        pos = len(self._records)
        if self._times and rec.timestamp < self._times[-1]:
            self._monotone = False
        self._records.append(rec)
        self._times.append(rec.timestamp)
        if rec.subject is not None:
            self._by_subject.setdefault(rec.subject, []).append(pos)
        if rec.resource_id is not None:
            self._by_resource.setdefault(rec.resource_id, []).append(pos)
        if rec.jti is not None:
            self._by_jti.setdefault(rec.jti, []).append(pos)
        if rec.outcome == POLICY_UPDATED and rec.resource_id is not None:
            self._latest_update[rec.resource_id] = rec

    def _append(self, outcome: str, timestamp: float, fields: dict[str, Any]) -> ActivityRecord:
        seq = self._records[-1].seq + 1 if self._records else 1
        rec = ActivityRecord(seq=seq, timestamp=timestamp, outcome=outcome, **fields)
        if self.sink_path is not None:
            if self._fh is None:
                raise SinkUnavailable("audit sink is closed")
            try:
                self._fh.write(json.dumps(rec.to_document(), sort_keys=True) + "\n")
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except (OSError, ValueError) as exc:
                raise SinkUnavailable(str(exc)) from exc
        self._index(rec)
        return rec

    def record(
        self,
        outcome: str,
        *,
        subject: str | None = None,
        resource_id: str | None = None,
        action: str | None = None,
        jti: str | None = None,
        policy_version: int | None = None,
        reason: str = "",
        stage: str = "",
        detail: Mapping[str, Any] | None = None,
        timestamp: float | None = None,
    ) -> int:
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        detail = dict(detail or {})
        with self._lock:
            if timestamp is None:
                timestamp = self.clock.now() if self.clock is not None else 0.0
            if outcome == TRAP_REQUIRED and resource_id in self._latest_update:
                update = self._latest_update[resource_id]
                if update.policy_version == policy_version:
                    detail.setdefault("policy_update_seq", update.seq)
            rec = self._append(
                outcome,
                timestamp,
                dict(
                    subject=subject,
                    resource_id=resource_id,
                    action=action,
                    jti=jti,
                    policy_version=policy_version,
                    reason=reason,
                    stage=stage,
                    detail=detail,
                ),
            )
            if outcome == DENY and subject is not None and self.deny_threshold > 0:
                denies = self._count(self._by_subject.get(subject, []), timestamp, self.risk_window, {DENY})
                if denies == self.deny_threshold:
                    self._append(
                        RISK_FLAGGED,
                        timestamp,
                        dict(
                            subject=subject,
                            resource_id=resource_id,
                            reason="deny_threshold",
                            stage="monitor",
                            detail={"deny_count": denies, "window": self.risk_window, "recommend": "policy_review"},
                        ),
                    )
            return rec.seq

    def on_policy_change(self, policy) -> int:
        """Log a PolicyUpdated record; later stale-binding traps on this resource cite it."""
        return self.record(
            POLICY_UPDATED,
            resource_id=policy.resource_id,
            policy_version=policy.rap_Tno,
            reason="policy_update",
            stage="control",
            detail={"required_credentials": list(policy.required_credentials)},
        )

    def latest_update(self, resource_id: str) -> ActivityRecord | None:
        with self._lock:
            return self._latest_update.get(resource_id)

    @property
    def records(self) -> list[ActivityRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def audit(
        self,
        subject: str | None = None,
        resource_id: str | None = None,
        jti: str | None = None,
        since: float | None = None,
        until: float | None = None,
        outcome: str | None = None,
    ) -> list[ActivityRecord]:
        with self._lock:
            candidates: Iterable[int] = range(len(self._records))
            for key, index in ((subject, self._by_subject), (resource_id, self._by_resource), (jti, self._by_jti)):
                if key is not None:
                    candidates = index.get(key, [])
                    break
            out = []
            for pos in candidates:
                rec = self._records[pos]
                if subject is not None and rec.subject != subject:
                    continue
                if resource_id is not None and rec.resource_id != resource_id:
                    continue
                if jti is not None and rec.jti != jti:
                    continue
                if since is not None and rec.timestamp < since:
                    continue
                if until is not None and rec.timestamp > until:
                    continue
                if outcome is not None and rec.outcome != outcome:
                    continue
                out.append(rec)
            return out

    def _count(self, positions: list[int], now: float, window: float, outcomes: frozenset | set) -> int:
        lo_t = now - window
        if self._monotone:
            times = [self._times[p] for p in positions] if positions is not None else self._times
            start = bisect.bisect_right(times, lo_t)
            stop = bisect.bisect_right(times, now)
            chosen = positions[start:stop]
        else:
            chosen = [p for p in positions if lo_t < self._times[p] <= now]
        return sum(1 for p in chosen if self._records[p].outcome in outcomes)

    def stats(
        self,
        subject: str | None = None,
        resource_id: str | None = None,
        window: float = 300.0,
        now: float | None = None,
    ) -> RiskCounter:
        """Counts over records with ``now - window < timestamp <= now``."""
        with self._lock:
            if now is None:
                now = self.clock.now() if self.clock is not None else (self._times[-1] if self._times else 0.0)
            if subject is not None:
                positions = self._by_subject.get(subject, [])
                if resource_id is not None:
                    positions = [p for p in positions if self._records[p].resource_id == resource_id]
            elif resource_id is not None:
                positions = self._by_resource.get(resource_id, [])
            else:
                positions = list(range(len(self._records)))
            return RiskCounter(
                subject=subject,
                resource_id=resource_id,
                window=window,
                trap_count=self._count(positions, now, window, {TRAP_REQUIRED}),
                deny_count=self._count(positions, now, window, {DENY}),
                request_count=self._count(positions, now, window, REQUEST_OUTCOMES),
            )
