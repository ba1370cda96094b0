"""Log monitors: append-only checks, entry validation, and checkpoint gossip.

A monitor keeps its own Merkle tree of every leaf hash it has verified.
That local tree answers most questions without trusting the log: the
root at any earlier size, and consistency paths from any earlier size to
the verified head. Inconsistency evidence is therefore always stated the
same way, as two signed checkpoints plus a prefix root and consistency
path that tie the prefix to the larger checkpoint while differing from
the smaller one. :func:`verify_inconsistency` re-checks that from the
evidence alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .encoding import EncodingError, b64d, b64e, canonical_json, digest_from_b64, parse_canonical, sha256
from .identity import Identity, Role, TrustStore, verify_signature
from .kernels import leaf_hash
from .logservice import LogClient, LogRequestError, LogUnavailable
from .merkle_log import (
    Checkpoint,
    ConsistencyProof,
    MerkleTree,
    verify_checkpoint,
    verify_consistency,
)
from .statements import (
    EndorsementStatement,
    ProvenanceStatement,
    RevocationList,
    SignerStatus,
    Statement,
    decode_statement,
    sign_statement,
    verify_signatures,
)

log = logging.getLogger(__name__)


class AlarmKind(str, Enum):
    APPEND_ONLY_VIOLATION = "append_only_violation"
    SPLIT_VIEW = "split_view"
    INVALID_ENTRY = "invalid_entry"
    INVALID_CHECKPOINT = "invalid_checkpoint"
    RELEASE_ANOMALY = "release_anomaly"


@dataclass(frozen=True)
class Alarm:
    kind: AlarmKind
    origin: str
    evidence: dict
    detail: str
    raised_by: Identity
    raised_at: int
    signature: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AlarmKind(self.kind))
        object.__setattr__(self, "raised_by", self.raised_by.public())
        canonical_json(self.evidence)  # reject evidence that cannot be encoded

    def to_dict(self) -> dict:
        return {
            "kind": "alarm",
            "alarm_kind": self.kind.value,
            "origin": self.origin,
            "evidence": self.evidence,
            "detail": self.detail,
            "raised_by": self.raised_by.to_dict(),
            "raised_at": self.raised_at,
            "signature": b64e(self.signature),
        }

    def signing_body(self) -> bytes:
        d = self.to_dict()
        del d["signature"]
        return canonical_json(d)

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())

    @property
    def key(self) -> bytes:
        """Identity of the observation, independent of who raised it and when."""
        return sha256(canonical_json([self.kind.value, self.origin, self.evidence]))

    def verify_signature(self) -> bool:
        return verify_signature(self.raised_by.public_key, self.signing_body(), self.signature)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Alarm":
        if d.get("kind") != "alarm":
            raise EncodingError("not an alarm")
        return cls(
            AlarmKind(d["alarm_kind"]),
            d["origin"],
            d["evidence"],
            d["detail"],
            Identity.from_dict(d["raised_by"]),
            d["raised_at"],
            b64d(d["signature"]),
        )

    @classmethod
    def decode(cls, data: bytes) -> "Alarm":
        return cls.from_dict(parse_canonical(data))


def _sign_alarm(kind: AlarmKind, origin: str, evidence: dict, detail: str, by: Identity, now: int) -> Alarm:
    unsigned = Alarm(kind, origin, evidence, detail, by, now)
    return Alarm(kind, origin, evidence, detail, by, now, by.sign(unsigned.signing_body()))


def inconsistency_evidence(
    a: Checkpoint, b: Checkpoint, prefix_root: bytes | None = None, proof: ConsistencyProof | None = None, **extra: object
) -> dict:
    """Evidence that two checkpoints cannot both describe one append-only log.

    Checkpoints are ordered by size. For unequal sizes ``prefix_root`` is
    the larger tree's root at the smaller size and ``proof`` ties it to
    the larger checkpoint.
    """
    small, large = sorted((a, b), key=lambda c: (c.tree_size, c.root_hash))
    d = {
        "checkpoints": [small.to_dict(), large.to_dict()],
        "prefix_root": None if prefix_root is None else b64e(prefix_root),
        "proof": None if proof is None else proof.to_dict(),
    }
    d.update(extra)
    return d


def verify_inconsistency(evidence: Mapping, log_key: bytes) -> bool:
    """Re-check inconsistency evidence using only the evidence and the log key."""
    try:
        small, large = (Checkpoint.from_dict(c) for c in evidence["checkpoints"])
        if small.origin != large.origin:
            return False
        if not (verify_checkpoint(small, log_key) and verify_checkpoint(large, log_key)):
            return False
        if small.tree_size == large.tree_size:
            return small.root_hash != large.root_hash
        if small.tree_size > large.tree_size or evidence.get("prefix_root") is None or evidence.get("proof") is None:
            return False
        prefix = digest_from_b64(evidence["prefix_root"], "prefix_root")
        proof = ConsistencyProof.from_dict(evidence["proof"])
        if (proof.old_size, proof.new_size) != (small.tree_size, large.tree_size):
            return False
        if small.tree_size == 0:
            return False  # every log extends the empty tree
        return prefix != small.root_hash and verify_consistency(prefix, large.root_hash, proof)
    except (EncodingError, KeyError, TypeError, ValueError):
        return False


def verify_alarm(alarm: Alarm, log_key: bytes) -> bool:
    """Signature check plus, for fork alarms, independent evidence check."""
    if not alarm.verify_signature():
        return False
    if alarm.kind in (AlarmKind.SPLIT_VIEW, AlarmKind.APPEND_ONLY_VIOLATION):
        return verify_inconsistency(alarm.evidence, log_key)
    if alarm.kind is AlarmKind.INVALID_CHECKPOINT:
        try:
            cp = Checkpoint.from_dict(alarm.evidence["checkpoint"])
        except (EncodingError, KeyError, TypeError):
            return False
        return not verify_checkpoint(cp, log_key)
    return True


# ---------------------------------------------------------------------------
# Entry validation


@dataclass(frozen=True)
class EntryResult:
    index: int
    valid: bool
    reason: str = ""
    anomaly: str = ""
    statement_id: Optional[bytes] = None
    conflicts_with: Optional[bytes] = None


@dataclass
class _Release:
    statement_id: bytes
    binary_hash: bytes
    version: Optional[str]
    issued_at: int
    not_after: int


class ReleaseHistory:
    """Endorsements seen so far, for release-pattern checks."""

    def __init__(self) -> None:
        self._by_version: dict[str, list[_Release]] = {}
        self._by_binary: dict[bytes, list[_Release]] = {}

    def check(self, stmt: EndorsementStatement) -> tuple[str, Optional[bytes]]:
        if stmt.version is not None:
            for prior in self._by_version.get(stmt.version, []):
                if prior.binary_hash != stmt.binary_hash:
                    return f"duplicate version number {stmt.version!r} for a different binary", prior.statement_id
        for prior in self._by_binary.get(stmt.binary_hash, []):
            overlap = stmt.issued_at < prior.not_after and prior.issued_at < stmt.not_after
            if prior.version == stmt.version and overlap and prior.statement_id != stmt.id:
                return "duplicate release of the same binary and version with overlapping validity", prior.statement_id
        return "", None

    def add(self, stmt: EndorsementStatement) -> None:
        rel = _Release(stmt.id, stmt.binary_hash, stmt.version, stmt.issued_at, stmt.not_after)
        if stmt.version is not None:
            self._by_version.setdefault(stmt.version, []).append(rel)
        self._by_binary.setdefault(stmt.binary_hash, []).append(rel)

    def copy(self) -> "ReleaseHistory":
        c = ReleaseHistory()
        c._by_version = {k: list(v) for k, v in self._by_version.items()}
        c._by_binary = {k: list(v) for k, v in self._by_binary.items()}
        return c


def _signature_problem(stmt: Statement, trust: TrustStore | None) -> str:
    results = verify_signatures(stmt, trust)
    if not results:
        if isinstance(stmt, ProvenanceStatement):
            return ""  # provenance may be unsigned when the owner builds
        return "unsigned statement"
    for r in results:
        if r.status is SignerStatus.INVALID:
            return "invalid signature"
        if r.status is SignerStatus.WRONG_ROLE:
            return f"signer {r.name} lacks a role permitted for this statement"
    return ""


def validate_entries(
    entries: Iterable[tuple[int, bytes]],
    trust: TrustStore | None = None,
    history: ReleaseHistory | None = None,
) -> list[EntryResult]:
    """Classify each ``(index, payload)``; ``history`` is updated in place."""
    history = history if history is not None else ReleaseHistory()
    out = []
    for index, payload in entries:
        try:
            stmt = decode_statement(payload)
        except EncodingError as exc:
            out.append(EntryResult(index, False, f"undecodable statement: {exc}"))
            continue
        problems = stmt.problems()
        if problems:
            out.append(EntryResult(index, False, problems[0], statement_id=stmt.id))
            continue
        sig_problem = _signature_problem(stmt, trust)
        if sig_problem:
            out.append(EntryResult(index, False, sig_problem, statement_id=stmt.id))
            continue
        anomaly, conflict = "", None
        if isinstance(stmt, EndorsementStatement):
            anomaly, conflict = history.check(stmt)
            history.add(stmt)
        out.append(EntryResult(index, True, "", anomaly, stmt.id, conflict))
    return out


# ---------------------------------------------------------------------------
# Monitor


@dataclass(frozen=True)
class GossipMessage:
    sender: str
    checkpoints: tuple[Checkpoint, ...]
    sent_at: int
    alarms: tuple[Alarm, ...] = ()

    def __post_init__(self) -> None:
        cps = tuple(sorted(self.checkpoints, key=lambda c: c.tree_size))
        if len({c.origin for c in cps}) > 1:
            raise ValueError("gossip checkpoints must share one origin")
        object.__setattr__(self, "checkpoints", cps)
        object.__setattr__(self, "alarms", tuple(self.alarms))

    def to_dict(self) -> dict:
        return {
            "kind": "gossip",
            "sender": self.sender,
            "checkpoints": [c.to_dict() for c in self.checkpoints],
            "sent_at": self.sent_at,
            "alarms": [a.to_dict() for a in self.alarms],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GossipMessage":
        return cls(
            d["sender"],
            tuple(Checkpoint.from_dict(c) for c in d["checkpoints"]),
            d["sent_at"],
            tuple(Alarm.from_dict(a) for a in d["alarms"]),
        )


class Monitor:
    """One monitor's state and its sequential poll/gossip loop."""

    def __init__(
        self,
        identity: Identity,
        log: LogClient,
        log_key: bytes,
        origin: str,
        *,
        trust: TrustStore | None = None,
        clock: Callable[[], int] = lambda: 0,
        history_depth: int = 2,
    ) -> None:
        if identity.role is not Role.MONITOR:
            raise ValueError("monitor identity must have role monitor")
        self.identity = identity
        self.log = log
        self.log_key = log_key
        self.origin = origin
        self.trust = trust
        self.clock = clock
        self.history_depth = history_depth
        self.tree = MerkleTree()
        self.last_checkpoint: Optional[Checkpoint] = None
        self.history: list[Checkpoint] = []
        self.releases = ReleaseHistory()
        self.peer_views: dict[str, tuple[Checkpoint, ...]] = {}
        self.peers: dict[str, bytes] = {}
        self.alarms: list[Alarm] = []
        self.peer_alarms: list[Alarm] = []
        self.notices: list[str] = []
        self._seen: set[bytes] = set()
        self._outbox: list[Alarm] = []

    @property
    def name(self) -> str:
        return self.identity.name

    @property
    def verified_size(self) -> int:
        return self.tree.size

    def add_peer(self, name: str, public_key: bytes) -> None:
        self.peers[name] = public_key

    # -- alarms -------------------------------------------------------------

    def _raise(self, kind: AlarmKind, evidence: dict, detail: str) -> list[Alarm]:
        alarm = _sign_alarm(kind, self.origin, evidence, detail, self.identity, self.clock())
        if alarm.key in self._seen:
            return []
        self._seen.add(alarm.key)
        self.alarms.append(alarm)
        self._outbox.append(alarm)
        log.info("%s raised %s: %s", self.name, kind.value, detail)
        return [alarm]

    def _notice(self, text: str) -> None:
        self.notices.append(text)
        log.info("%s: %s", self.name, text)

    # -- polling ------------------------------------------------------------

    def _inconsistent_with_local(self, cp: Checkpoint) -> dict | None:
        """Evidence if ``cp`` (size <= verified) disagrees with our tree, else None."""
        assert self.last_checkpoint is not None and cp.tree_size <= self.verified_size
        local = self.tree.root(cp.tree_size)
        if local == cp.root_hash:
            return None
        if cp.tree_size == self.verified_size:
            return inconsistency_evidence(cp, self.last_checkpoint)
        if cp.tree_size == 0:
            return None  # a well-formed empty checkpoint always has the empty root
        proof = ConsistencyProof(cp.tree_size, self.verified_size, tuple(self.tree.consistency_path(cp.tree_size, self.verified_size)))
        return inconsistency_evidence(cp, self.last_checkpoint, local, proof)

    def _rebuild_evidence(self, log: LogClient, old: Checkpoint, new: Checkpoint, served: ConsistencyProof | None) -> dict:
        """Strong evidence for a failed append-only check, if the log's entries allow it."""
        extra = {"served_proof": None if served is None else served.to_dict()}
        try:
            t = MerkleTree([leaf_hash(p) for p in log.entries(0, new.tree_size)])
        except (LogUnavailable, LogRequestError, EncodingError, OSError):
            return inconsistency_evidence(old, new, **extra)
        if t.root() != new.root_hash or old.tree_size == 0:
            return inconsistency_evidence(old, new, **extra)
        proof = ConsistencyProof(old.tree_size, new.tree_size, tuple(t.consistency_path(old.tree_size, new.tree_size)))
        return inconsistency_evidence(old, new, t.root(old.tree_size), proof, **extra)

    def _accept(self, cp: Checkpoint) -> None:
        self.last_checkpoint = cp
        if not self.history or self.history[-1].tree_size != cp.tree_size:
            self.history.append(cp)
            del self.history[: -self.history_depth]
        else:
            self.history[-1] = cp

    def poll(self, log: LogClient | None = None) -> list[Alarm]:
        """Fetch the latest checkpoint and verify everything new behind it."""
        log = log or self.log
        try:
            return self._poll(log)
        except (LogUnavailable, LogRequestError, OSError) as exc:
            self._notice(f"log unavailable during poll: {exc}")
            return []

    def _poll(self, log: LogClient) -> list[Alarm]:
        cp = log.checkpoint()
        if cp.origin != self.origin or not verify_checkpoint(cp, self.log_key):
            return self._raise(AlarmKind.INVALID_CHECKPOINT, {"checkpoint": cp.to_dict()}, "checkpoint signature or origin invalid")
        old = self.last_checkpoint
        if old is not None and cp.tree_size <= self.verified_size:
            evidence = self._inconsistent_with_local(cp)
            if evidence is not None:
                return self._raise(AlarmKind.APPEND_ONLY_VIOLATION, evidence, f"checkpoint at size {cp.tree_size} contradicts verified history")
            if cp.tree_size < self.verified_size:
                self._notice(f"log served stale checkpoint {cp.tree_size} < {self.verified_size}")
            return []

        served = None
        if old is not None and old.tree_size > 0:
            served = log.consistency_proof(old.tree_size, cp.tree_size)
            ok = (served.old_size, served.new_size) == (old.tree_size, cp.tree_size) and verify_consistency(old.root_hash, cp.root_hash, served)
            if not ok:
                evidence = self._rebuild_evidence(log, old, cp, served)
                return self._raise(AlarmKind.APPEND_ONLY_VIOLATION, evidence, f"no valid consistency proof from {old.tree_size} to {cp.tree_size}")

        start = self.verified_size
        payloads = log.entries(start, cp.tree_size)
        candidate = self.tree.copy()
        candidate.extend([leaf_hash(p) for p in payloads])
        if candidate.root() != cp.root_hash:
            evidence = {"checkpoint": cp.to_dict(), "start": start, "computed_root": b64e(candidate.root())}
            return self._raise(AlarmKind.INVALID_ENTRY, evidence, f"entries {start}..{cp.tree_size} do not hash to the checkpoint root")

        # Structure verified: advance, then report statement-level problems.
        self.tree = candidate
        self._accept(cp)
        alarms: list[Alarm] = []
        for r in validate_entries(zip(range(start, cp.tree_size), payloads), self.trust, self.releases):
            payload = payloads[r.index - start]
            if not r.valid:
                ev = {"index": r.index, "payload": b64e(payload), "checkpoint": cp.to_dict(), "reason": r.reason}
                alarms += self._raise(AlarmKind.INVALID_ENTRY, ev, f"entry {r.index}: {r.reason}")
            elif r.anomaly:
                ev = {
                    "index": r.index,
                    "statement_id": b64e(r.statement_id or b""),
                    "conflicts_with": None if r.conflicts_with is None else b64e(r.conflicts_with),
                    "reason": r.anomaly,
                }
                alarms += self._raise(AlarmKind.RELEASE_ANOMALY, ev, f"entry {r.index}: {r.anomaly}")
        return alarms

    # -- gossip -------------------------------------------------------------

    def gossip_message(self) -> GossipMessage:
        outbox, self._outbox = tuple(self._outbox), []
        return GossipMessage(self.name, tuple(self.history), self.clock(), outbox)

    def receive(self, msg: GossipMessage, log: LogClient | None = None) -> list[Alarm]:
        """Cross-check a peer's checkpoints against our own verified view."""
        log = log or self.log
        self.peer_views[msg.sender] = msg.checkpoints
        for alarm in msg.alarms:
            if alarm.verify_signature():
                self.peer_alarms.append(alarm)
        alarms: list[Alarm] = []
        for cp in msg.checkpoints:
            if cp.origin != self.origin or not verify_checkpoint(cp, self.log_key):
                self._notice(f"ignored unverifiable checkpoint from {msg.sender}")
                continue
            if cp.tree_size > self.verified_size:
                alarms += self.poll(log)
            if self.last_checkpoint is None or cp.tree_size > self.verified_size:
                self._notice(f"{msg.sender} is ahead of our view ({cp.tree_size} > {self.verified_size})")
                continue
            evidence = self._inconsistent_with_local(cp)
            if evidence is not None:
                alarms += self._raise(
                    AlarmKind.SPLIT_VIEW,
                    evidence,
                    f"{msg.sender} holds checkpoint {cp.tree_size} inconsistent with our view at {self.verified_size}",
                )
        return alarms

    def confirms(self, alarm: Alarm) -> bool:
        """Would this monitor co-sign a revocation based on ``alarm``?

        The raiser must be this monitor or a registered peer, and fork
        evidence must re-verify under this monitor's own log key.
        """
        known = self.peers.get(alarm.raised_by.name) == alarm.raised_by.public_key or alarm.raised_by.public_key == self.identity.public_key
        return known and alarm.origin == self.origin and verify_alarm(alarm, self.log_key)


def connect(monitors: Sequence[Monitor]) -> None:
    """Register every monitor as a peer of every other (full mesh)."""
    for m in monitors:
        for p in monitors:
            if p is not m:
                m.add_peer(p.name, p.identity.public_key)


def gossip_round(monitors: Sequence[Monitor], *, poll_first: bool = True) -> list[Alarm]:
    """One synchronous full-mesh round: optional poll, then all-to-all gossip."""
    if len(monitors) < 2:
        raise ValueError("gossip needs at least two monitors")
    alarms: list[Alarm] = []
    if poll_first:
        for m in monitors:
            alarms += m.poll()
    messages = [m.gossip_message() for m in monitors]
    for receiver in monitors:
        for msg in messages:
            if msg.sender != receiver.name:
                alarms += receiver.receive(msg)
    return alarms


def collective_revocation(
    alarms: Sequence[Alarm],
    monitors: Sequence[Monitor],
    threshold: int,
    now: int,
    revoked_ids: Iterable[bytes] = (),
) -> RevocationList | None:
    """Have each monitor independently check the alarms; sign if enough agree.

    The resulting list distrusts the log origin of every confirmed fork
    alarm. Returns ``None`` when fewer than ``threshold`` monitors confirm.
    """
    if threshold < 1:
        raise ValueError("threshold must be at least 1")
    fork_kinds = (AlarmKind.SPLIT_VIEW, AlarmKind.APPEND_ONLY_VIOLATION)
    confirmed_by: dict[str, list[Monitor]] = {}
    for m in monitors:
        for origin in sorted({a.origin for a in alarms if a.kind in fork_kinds and m.confirms(a)}):
            confirmed_by.setdefault(origin, []).append(m)
    origins = {o for o, ms in confirmed_by.items() if len(ms) >= threshold}
    # Every signer must have confirmed every origin it signs for.
    confirming = [m for m in monitors if all(m in confirmed_by[o] for o in origins)] if origins else []
    if len(confirming) < threshold:
        return None
    crl: Statement = RevocationList(confirming[0].identity, tuple(revoked_ids), now, tuple(sorted(origins)))
    for m in confirming:
        crl = sign_statement(crl, m.identity)
    assert isinstance(crl, RevocationList)
    return crl
