"""Client-side verification of a binary against the transparency log.

The decision core is pure: :func:`fetch_snapshot` gathers everything from
the log once (checkpoint, entries, inclusion proofs for the statements that
matter), and :func:`verify_endorsement`, :func:`scan_alerts`,
:func:`evaluate_level` and :func:`decide` work on that immutable snapshot.
Identical snapshot and policy give identical verdicts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence, Union

from .encoding import EncodingError, b64d, b64e, canonical_json, digest_from_b64, parse_canonical
from .logservice import LogClient, LogRequestError, LogUnavailable
from .merkle_log import Checkpoint, InclusionProof, MerkleLog, verify_checkpoint, verify_inclusion
from .kernels import leaf_hash
from .statements import (
    Category,
    CertKind,
    CrlSource,
    EndorsementStatement,
    Report,
    ReviewCertificate,
    RevocationList,
    Statement,
    decode_statement,
    is_log_distrusted,
    is_revoked,
    valid_signers,
)

# Reason codes, in the order checks are applied.
LOG_UNREACHABLE = "log unreachable"
INVALID_CHECKPOINT = "invalid checkpoint"
LOG_DISTRUSTED = "log distrusted"
NO_ENDORSEMENT = "no endorsement"
INCLUSION_INVALID = "inclusion proof invalid"
NOT_YET_VALID = "not yet valid"
PASSIVELY_REVOKED = "passively revoked"
THRESHOLD_NOT_MET = "signature threshold not met"
ACTIVELY_REVOKED = "actively revoked"
UNRESOLVED_ALERT = "unresolved alerting certificate"
BROKEN_PROMISE = "broken certification promise"
INSUFFICIENT_LEVEL = "insufficient transparency level"

# Endorsement checks by stage; with several candidates the reported reason
# is the one from the candidate that got furthest.
_STAGES = (INCLUSION_INVALID, NOT_YET_VALID, PASSIVELY_REVOKED, THRESHOLD_NOT_MET, ACTIVELY_REVOKED)


class Level(IntEnum):
    L0 = 0
    L1 = 1
    L2 = 2
    L3 = 3

    @classmethod
    def parse(cls, text: Union[str, int, "Level"]) -> "Level":
        if isinstance(text, int):
            return cls(text)
        try:
            return cls[text.upper()]
        except KeyError:
            raise ValueError(f"unknown transparency level {text!r}") from None


class Status(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    INCONCLUSIVE = "inconclusive"

    @property
    def exit_code(self) -> int:
        return {Status.ACCEPT: 0, Status.REJECT: 1, Status.INCONCLUSIVE: 2}[self]


@dataclass(frozen=True)
class EvidenceClaim:
    binary_hash: bytes
    source_tag: str = "local-binary"

    def __post_init__(self) -> None:
        if not isinstance(self.binary_hash, bytes) or len(self.binary_hash) != 32:
            raise ValueError("binary_hash must be a 32-byte digest")
        if self.source_tag not in ("local-binary", "remote-attestation"):
            raise ValueError(f"unknown evidence source {self.source_tag!r}")


def _keys(values: Iterable[bytes]) -> frozenset[bytes]:
    out = frozenset(values)
    for k in out:
        if not isinstance(k, bytes) or len(k) != 32:
            raise ValueError("trusted keys must be 32-byte Ed25519 public keys")
    return out


@dataclass(frozen=True)
class AuditPolicy:
    trusted_log_key: bytes
    now: int
    first_party_keys: frozenset[bytes] = frozenset()
    first_party_threshold: int = 1
    third_party_keys: frozenset[bytes] = frozenset()
    third_party_threshold: int = 1
    community_keys: frozenset[bytes] = frozenset()
    community_threshold: int = 1
    required_level: Level = Level.L1
    crl_sources: tuple[CrlSource, ...] = ()
    enforce_promises: bool = True
    alerting_blocks: bool = True
    l3_requires_third_party: bool = True
    origin: Optional[str] = None  # when set, checkpoints must carry this origin

    def __post_init__(self) -> None:
        object.__setattr__(self, "trusted_log_key", next(iter(_keys([self.trusted_log_key]))))
        for name in ("first_party_keys", "third_party_keys", "community_keys"):
            object.__setattr__(self, name, _keys(getattr(self, name)))
        for name in ("first_party_threshold", "third_party_threshold", "community_threshold"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be an integer >= 1")
        object.__setattr__(self, "required_level", Level.parse(self.required_level))
        object.__setattr__(self, "crl_sources", tuple(self.crl_sources))
        if isinstance(self.now, bool) or not isinstance(self.now, int) or self.now < 0:
            raise ValueError("now must be a non-negative integer")

    def with_now(self, now: int) -> "AuditPolicy":
        from dataclasses import replace

        return replace(self, now=now)

    @property
    def certifier_keys(self) -> frozenset[bytes]:
        return self.first_party_keys | self.third_party_keys | self.community_keys

    def to_dict(self) -> dict:
        return {
            "trusted_log_key": b64e(self.trusted_log_key),
            "origin": self.origin,
            "now": self.now,
            "first_party_keys": sorted(b64e(k) for k in self.first_party_keys),
            "first_party_threshold": self.first_party_threshold,
            "third_party_keys": sorted(b64e(k) for k in self.third_party_keys),
            "third_party_threshold": self.third_party_threshold,
            "community_keys": sorted(b64e(k) for k in self.community_keys),
            "community_threshold": self.community_threshold,
            "required_level": self.required_level.name,
            "crl_sources": [s.to_dict() for s in self.crl_sources],
            "enforce_promises": self.enforce_promises,
            "alerting_blocks": self.alerting_blocks,
            "l3_requires_third_party": self.l3_requires_third_party,
        }

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "AuditPolicy":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown policy fields: {sorted(extra)}")
        kw = dict(d)
        kw["trusted_log_key"] = b64d(kw["trusted_log_key"])
        for name in ("first_party_keys", "third_party_keys", "community_keys"):
            if name in kw:
                kw[name] = frozenset(b64d(k) for k in kw[name])
        if "crl_sources" in kw:
            kw["crl_sources"] = tuple(CrlSource.from_dict(s) for s in kw["crl_sources"])
        return cls(**kw)

    @classmethod
    def decode(cls, data: bytes) -> "AuditPolicy":
        return cls.from_dict(parse_canonical(data))


# ---------------------------------------------------------------------------
# Snapshot


@dataclass(frozen=True)
class LogSnapshot:
    """Everything the decision core reads from the log, fetched once."""

    checkpoint: Checkpoint
    entries: tuple[bytes, ...]
    proofs: Mapping[int, InclusionProof] = field(default_factory=dict)

    @cached_property
    def statements(self) -> tuple[tuple[int, Statement], ...]:
        out = []
        for i, payload in enumerate(self.entries):
            try:
                out.append((i, decode_statement(payload)))
            except EncodingError:
                continue
        return tuple(out)

    def included(self, index: int) -> bool:
        """Does the entry at ``index`` have an inclusion proof under the checkpoint?"""
        proof = self.proofs.get(index)
        if proof is None or index >= len(self.entries):
            return False
        cp = self.checkpoint
        return (
            proof.leaf_index == index
            and proof.tree_size == cp.tree_size
            and verify_inclusion(leaf_hash(self.entries[index]), proof, cp.root_hash)
        )

    def crls(self) -> list[RevocationList]:
        return [s for _, s in self.statements if isinstance(s, RevocationList)]


def _relevant(stmt: Statement, binary_hash: bytes) -> bool:
    if isinstance(stmt, EndorsementStatement):
        return stmt.binary_hash == binary_hash
    if isinstance(stmt, ReviewCertificate):
        return stmt.subject_binary_hash == binary_hash or stmt.kind is CertKind.FOLLOW_UP
    return False


def fetch_snapshot(log: Union[LogClient, MerkleLog], binary_hash: bytes) -> LogSnapshot:
    """Read the log and inclusion proofs for statements about ``binary_hash``.

    Raises :class:`LogUnavailable` when the log cannot be reached or
    answers with an error.
    """
    client = LogClient.local(log) if isinstance(log, MerkleLog) else log
    try:
        cp = client.checkpoint()
        entries = tuple(client.entries(0, cp.tree_size))
        snap = LogSnapshot(cp, entries)
        proofs = {}
        for index, stmt in snap.statements:
            if _relevant(stmt, binary_hash):
                proofs[index] = client.inclusion_proof(index, cp.tree_size)
    except LogRequestError as exc:
        raise LogUnavailable(f"log answered with an error: {exc}") from exc
    except (EncodingError, KeyError, TypeError) as exc:
        raise LogUnavailable(f"malformed log response: {exc}") from exc
    return LogSnapshot(cp, entries, proofs)


# ---------------------------------------------------------------------------
# Checks


def _checkpoint_problem(snapshot: LogSnapshot, policy: AuditPolicy) -> Optional[str]:
    cp = snapshot.checkpoint
    if not verify_checkpoint(cp, policy.trusted_log_key):
        return INVALID_CHECKPOINT
    if policy.origin is not None and cp.origin != policy.origin:
        return INVALID_CHECKPOINT
    if len(snapshot.entries) != cp.tree_size:
        return INVALID_CHECKPOINT
    return None


@dataclass(frozen=True)
class EndorsementCheck:
    ok: bool
    reason: Optional[str]
    index: Optional[int] = None
    endorsement: Optional[EndorsementStatement] = None
    proof: Optional[InclusionProof] = None
    warnings: tuple[str, ...] = ()

    @property
    def statement_id(self) -> Optional[bytes]:
        return None if self.endorsement is None else self.endorsement.id


def _check_candidate(index: int, stmt: EndorsementStatement, snapshot: LogSnapshot, policy: AuditPolicy, crls: Sequence[RevocationList]) -> tuple[Optional[str], tuple[str, ...]]:
    if not snapshot.included(index):
        return INCLUSION_INVALID, ()
    if stmt.problems() or policy.now < stmt.issued_at:
        return NOT_YET_VALID, ()
    if policy.now >= stmt.not_after:
        return PASSIVELY_REVOKED, ()
    if len(valid_signers(stmt, policy.first_party_keys)) < policy.first_party_threshold:
        return THRESHOLD_NOT_MET, ()
    status = is_revoked(stmt.id, crls, policy.crl_sources)
    if status.revoked:
        return ACTIVELY_REVOKED, status.warnings
    return None, status.warnings


def _candidates(claim_hash: bytes, snapshot: LogSnapshot, policy: AuditPolicy, extra_crls: Sequence[RevocationList]) -> list[EndorsementCheck]:
    crls = [*snapshot.crls(), *extra_crls]
    out = []
    for index, stmt in snapshot.statements:
        if isinstance(stmt, EndorsementStatement) and stmt.binary_hash == claim_hash:
            reason, warnings = _check_candidate(index, stmt, snapshot, policy, crls)
            out.append(EndorsementCheck(reason is None, reason, index, stmt, snapshot.proofs.get(index), warnings))
    return out


def verify_endorsement(
    claim: EvidenceClaim,
    snapshot: LogSnapshot,
    policy: AuditPolicy,
    extra_crls: Sequence[RevocationList] = (),
) -> EndorsementCheck:
    """Find a valid, inclusion-proven, unrevoked endorsement for the claim."""
    problem = _checkpoint_problem(snapshot, policy)
    if problem:
        return EndorsementCheck(False, problem)
    checks = _candidates(claim.binary_hash, snapshot, policy, extra_crls)
    if not checks:
        return EndorsementCheck(False, NO_ENDORSEMENT)
    good = [c for c in checks if c.ok]
    if good:
        return good[-1]
    return max(checks, key=lambda c: _STAGES.index(c.reason))  # type: ignore[arg-type]


@dataclass(frozen=True)
class AlertStatus:
    index: int
    certificate: ReviewCertificate
    resolved: bool
    followup_ids: tuple[bytes, ...] = ()

    @property
    def alert_id(self) -> bytes:
        return self.certificate.id


def _trusted_cert(index: int, cert: ReviewCertificate, snapshot: LogSnapshot, keys: frozenset[bytes]) -> bool:
    return (
        cert.certifier.public_key in keys
        and not cert.problems()
        and bool(valid_signers(cert, keys))
        and snapshot.included(index)
    )


def scan_alerts(binary_hash: bytes, snapshot: LogSnapshot, policy: AuditPolicy) -> list[AlertStatus]:
    """Alerting certificates for ``binary_hash`` from trusted certifiers."""
    keys = policy.certifier_keys
    certs = [(i, s) for i, s in snapshot.statements if isinstance(s, ReviewCertificate)]
    out = []
    for index, cert in certs:
        if cert.kind is not CertKind.ALERTING or cert.subject_binary_hash != binary_hash:
            continue
        if not _trusted_cert(index, cert, snapshot, keys):
            continue
        followups = tuple(
            f.id
            for j, f in certs
            if f.kind is CertKind.FOLLOW_UP
            and f.body.alert_id == cert.id  # type: ignore[union-attr]
            and f.certifier.public_key == cert.certifier.public_key
            and _trusted_cert(j, f, snapshot, keys)
        )
        out.append(AlertStatus(index, cert, bool(followups), followups))
    return out


def _reporting_certifiers(binary_hash: bytes, snapshot: LogSnapshot, category: Category, keys: frozenset[bytes]) -> dict[bytes, bytes]:
    """Map certifier key to one supporting certificate id."""
    out: dict[bytes, bytes] = {}
    for index, s in snapshot.statements:
        if (
            isinstance(s, ReviewCertificate)
            and s.kind is CertKind.REPORTING
            and s.subject_binary_hash == binary_hash
            and s.certifier.category is category
            and isinstance(s.body, Report)
            and s.body.approved
            and _trusted_cert(index, s, snapshot, keys)
        ):
            out.setdefault(s.certifier.public_key, s.id)
    return out


@dataclass(frozen=True)
class LevelResult:
    level: Level
    supporting: tuple[bytes, ...] = ()
    endorsement: Optional[EndorsementCheck] = None
    promise_pending: bool = False
    promise_broken: bool = False


def _level_for(check: EndorsementCheck, binary_hash: bytes, snapshot: LogSnapshot, policy: AuditPolicy) -> LevelResult:
    stmt = check.endorsement
    assert stmt is not None
    third = _reporting_certifiers(binary_hash, snapshot, Category.THIRD_PARTY, policy.third_party_keys)
    community = _reporting_certifiers(binary_hash, snapshot, Category.COMMUNITY, policy.community_keys)
    certified = len(third) >= policy.third_party_threshold
    deadline = stmt.to_be_certified_by
    pending = deadline is not None and not certified and policy.now <= deadline
    broken = deadline is not None and not certified and policy.now > deadline
    supporting = [stmt.id]
    level = Level.L1
    if certified or (pending and policy.enforce_promises):
        level = Level.L2
        supporting += sorted(third.values())
    l3_base = certified or not policy.l3_requires_third_party
    if l3_base and stmt.open_sourced and len(community) >= policy.community_threshold:
        level = Level.L3
        supporting += sorted(community.values())
    return LevelResult(level, tuple(supporting), check, pending, broken)


def evaluate_level(
    binary_hash: bytes,
    snapshot: LogSnapshot,
    policy: AuditPolicy,
    extra_crls: Sequence[RevocationList] = (),
) -> LevelResult:
    """Highest level supported by any valid endorsement for ``binary_hash``."""
    if _checkpoint_problem(snapshot, policy):
        return LevelResult(Level.L0)
    good = [c for c in _candidates(binary_hash, snapshot, policy, extra_crls) if c.ok]
    if not good:
        return LevelResult(Level.L0)
    # Prefer the highest level, then an endorsement without a broken
    # promise, then the most recent one.
    results = [_level_for(c, binary_hash, snapshot, policy) for c in good]
    return max(results, key=lambda r: (r.level, not r.promise_broken, r.endorsement.index))  # type: ignore[union-attr]


# ---------------------------------------------------------------------------
# Verdict


@dataclass(frozen=True)
class AuditVerdict:
    status: Status
    achieved_level: Level
    reasons: tuple[str, ...]
    checked_at: int
    binary_hash: bytes
    supporting: tuple[bytes, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def accepted(self) -> bool:
        return self.status is Status.ACCEPT

    @property
    def exit_code(self) -> int:
        return self.status.exit_code

    def to_dict(self) -> dict:
        return {
            "kind": "audit_verdict",
            "status": self.status.value,
            "accepted": self.accepted,
            "achieved_level": self.achieved_level.name,
            "reasons": list(self.reasons),
            "checked_at": self.checked_at,
            "binary_hash": b64e(self.binary_hash),
            "supporting": [b64e(s) for s in self.supporting],
            "warnings": list(self.warnings),
        }

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "AuditVerdict":
        if d.get("kind") != "audit_verdict":
            raise ValueError("not an audit verdict")
        status = Status(d["status"])
        if d["accepted"] != (status is Status.ACCEPT):
            raise ValueError("accepted flag disagrees with status")
        return cls(
            status=status,
            achieved_level=Level[d["achieved_level"]],
            reasons=tuple(d["reasons"]),
            checked_at=d["checked_at"],
            binary_hash=digest_from_b64(d["binary_hash"], "binary_hash"),
            supporting=tuple(digest_from_b64(s, "supporting id") for s in d["supporting"]),
            warnings=tuple(d["warnings"]),
        )

    def summary(self) -> str:
        head = f"{self.status.value.upper()} level={self.achieved_level.name} binary={self.binary_hash.hex()}"
        return head if not self.reasons else head + " reasons: " + "; ".join(self.reasons)


def decide_snapshot(
    claim: EvidenceClaim,
    snapshot: LogSnapshot,
    policy: AuditPolicy,
    extra_crls: Sequence[RevocationList] = (),
) -> AuditVerdict:
    """Pure decision over an already fetched snapshot."""
    bh = claim.binary_hash

    def verdict(reasons: list[str], level: Level = Level.L0, supporting: Sequence[bytes] = (), warnings: Sequence[str] = ()) -> AuditVerdict:
        status = Status.ACCEPT if not reasons else Status.REJECT
        return AuditVerdict(status, level, tuple(reasons), policy.now, bh, tuple(supporting), tuple(warnings))

    problem = _checkpoint_problem(snapshot, policy)
    if problem:
        return verdict([problem])
    distrust = is_log_distrusted(snapshot.checkpoint.origin, [*snapshot.crls(), *extra_crls], policy.crl_sources)
    if distrust.revoked:
        return verdict([LOG_DISTRUSTED], warnings=distrust.warnings)
    check = verify_endorsement(claim, snapshot, policy, extra_crls)
    if not check.ok:
        return verdict([check.reason or NO_ENDORSEMENT], warnings=check.warnings)

    result = evaluate_level(bh, snapshot, policy, extra_crls)
    reasons = []
    if policy.alerting_blocks and any(not a.resolved for a in scan_alerts(bh, snapshot, policy)):
        reasons.append(UNRESOLVED_ALERT)
    if policy.enforce_promises and result.promise_broken:
        reasons.append(BROKEN_PROMISE)
    if result.level < policy.required_level:
        reasons.append(INSUFFICIENT_LEVEL)
    return verdict(reasons, result.level, result.supporting, check.warnings)


def decide(
    claim: EvidenceClaim,
    log: Union[LogClient, MerkleLog, LogSnapshot],
    policy: AuditPolicy,
    extra_crls: Sequence[RevocationList] = (),
) -> AuditVerdict:
    """Fetch from the log and decide; transport failures are inconclusive."""
    if isinstance(log, LogSnapshot):
        snapshot = log
    else:
        try:
            snapshot = fetch_snapshot(log, claim.binary_hash)
        except (LogUnavailable, OSError) as exc:
            return AuditVerdict(Status.INCONCLUSIVE, Level.L0, (LOG_UNREACHABLE,), policy.now, claim.binary_hash, (), (str(exc),))
    return decide_snapshot(claim, snapshot, policy, extra_crls)
