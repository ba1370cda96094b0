"""Signed statements: endorsements, provenance, review certificates, CRLs.

Every statement has a canonical encoding (sorted-key JSON with a ``kind``
discriminator) which doubles as the log payload. Signatures cover the
canonical encoding with the signature field(s) removed; a statement's id
is the SHA-256 of its full canonical encoding, signatures included.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple, Optional, Sequence, Union

from .encoding import (
    DIGEST_SIZE,
    EncodingError,
    b64d,
    b64e,
    canonical_json,
    digest_from_b64,
    parse_canonical,
    sha256,
)
from .identity import Identity, Role, TrustStore, verify_signature

DAY = 86_400
DEFAULT_VALIDITY = 30 * DAY


class Category(str, Enum):
    FIRST_PARTY = "first_party"
    THIRD_PARTY = "third_party"
    COMMUNITY = "community"


class Methodology(str, Enum):
    REPORTING = "reporting"
    ALERTING = "alerting"


class Motivation(str, Enum):
    AFFILIATED = "affiliated"
    INDEPENDENT = "independent"


class CertKind(str, Enum):
    REPORTING = "reporting"
    ALERTING = "alerting"
    FOLLOW_UP = "follow_up"


class Signature(NamedTuple):
    public_key: bytes
    signature: bytes

    def to_dict(self) -> dict:
        return {"public_key": b64e(self.public_key), "signature": b64e(self.signature)}

    @classmethod
    def from_dict(cls, d: dict) -> "Signature":
        return cls(b64d(d["public_key"]), b64d(d["signature"]))


def _digest(value: bytes, what: str) -> bytes:
    if not isinstance(value, bytes) or len(value) != DIGEST_SIZE:
        raise ValueError(f"{what} must be a 32-byte digest")
    return value


def _int(value: object, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"{what} must be an integer")
    return value


def _str(value: object, what: str, optional: bool = False) -> None:
    if value is None and optional:
        return
    if not isinstance(value, str):
        raise ValueError(f"{what} must be a string")


def _opt_b64(value: Optional[bytes]) -> Optional[str]:
    return None if value is None else b64e(value)


def _opt_digest(value: Optional[str], what: str) -> Optional[bytes]:
    return None if value is None else digest_from_b64(value, what)


def _strs(values: Iterable[str], what: str) -> tuple[str, ...]:
    out = tuple(values)
    if not all(isinstance(v, str) for v in out):
        raise ValueError(f"{what} must be strings")
    return out


# ---------------------------------------------------------------------------
# Certifier taxonomy


@dataclass(frozen=True)
class CertifierProfile:
    identity: Identity
    category: Category
    methodology: Methodology
    motivation: Motivation

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "methodology", Methodology(self.methodology))
        object.__setattr__(self, "motivation", Motivation(self.motivation))
        if self.category is Category.FIRST_PARTY and self.motivation is not Motivation.AFFILIATED:
            raise ValueError("first-party certifiers are always affiliated")
        if self.identity.role.value != self.category.value:
            raise ValueError(
                f"identity role {self.identity.role.value!r} does not match certifier category {self.category.value!r}"
            )

    @property
    def public_key(self) -> bytes:
        return self.identity.public_key

    def to_dict(self) -> dict:
        return {
            "identity": self.identity.to_dict(),
            "category": self.category.value,
            "methodology": self.methodology.value,
            "motivation": self.motivation.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CertifierProfile":
        return cls(
            Identity.from_dict(d["identity"]),
            Category(d["category"]),
            Methodology(d["methodology"]),
            Motivation(d["motivation"]),
        )


# ---------------------------------------------------------------------------
# Statements


class _Statement:
    KIND = ""
    # Names of fields excluded from the signed body.
    _SIG_FIELDS: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        raise NotImplementedError

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())

    def signing_body(self) -> bytes:
        d = self.to_dict()
        for name in self._SIG_FIELDS:
            d.pop(name, None)
        return canonical_json(d)

    @property
    def id(self) -> bytes:
        return sha256(self.encode())

    def problems(self) -> list[str]:
        """Semantic defects; empty when the statement is well-formed."""
        return []


@dataclass(frozen=True)
class EndorsementStatement(_Statement):
    binary_hash: bytes
    issued_at: int
    not_after: int
    claims: str = ""
    to_be_certified_by: Optional[int] = None
    provenance_ref: Optional[bytes] = None
    version: Optional[str] = None
    open_sourced: bool = False
    signatures: tuple[Signature, ...] = ()

    KIND = "endorsement"
    _SIG_FIELDS = ("signatures",)

    def __post_init__(self) -> None:
        _digest(self.binary_hash, "binary_hash")
        _int(self.issued_at, "issued_at")
        _int(self.not_after, "not_after")
        if self.to_be_certified_by is not None:
            _int(self.to_be_certified_by, "to_be_certified_by")
        if self.provenance_ref is not None:
            _digest(self.provenance_ref, "provenance_ref")
        _str(self.claims, "claims")
        _str(self.version, "version", optional=True)
        if not isinstance(self.open_sourced, bool):
            raise ValueError("open_sourced must be a boolean")
        object.__setattr__(self, "signatures", tuple(Signature(*s) for s in self.signatures))

    def problems(self) -> list[str]:
        out = []
        if self.issued_at >= self.not_after:
            out.append("malformed validity window")
        return out

    def valid_at(self, now: int) -> bool:
        return self.issued_at <= now < self.not_after

    def to_dict(self) -> dict:
        return {
            "kind": self.KIND,
            "binary_hash": b64e(self.binary_hash),
            "issued_at": self.issued_at,
            "not_after": self.not_after,
            "claims": self.claims,
            "to_be_certified_by": self.to_be_certified_by,
            "provenance_ref": _opt_b64(self.provenance_ref),
            "version": self.version,
            "open_sourced": self.open_sourced,
            "signatures": [s.to_dict() for s in self.signatures],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EndorsementStatement":
        if not isinstance(d["open_sourced"], bool):
            raise EncodingError("open_sourced must be a boolean")
        return cls(
            binary_hash=digest_from_b64(d["binary_hash"], "binary_hash"),
            issued_at=d["issued_at"],
            not_after=d["not_after"],
            claims=d["claims"],
            to_be_certified_by=d["to_be_certified_by"],
            provenance_ref=_opt_digest(d["provenance_ref"], "provenance_ref"),
            version=d["version"],
            open_sourced=d["open_sourced"],
            signatures=tuple(Signature.from_dict(s) for s in d["signatures"]),
        )


def build_config_dict(toolchain_id: str, build_commands: Sequence[str], build_flags: Sequence[str]) -> dict:
    return {
        "toolchain_id": toolchain_id,
        "build_commands": list(build_commands),
        "build_flags": list(build_flags),
    }


@dataclass(frozen=True)
class ProvenanceStatement(_Statement):
    source_hash: bytes
    toolchain_id: str
    build_commands: tuple[str, ...]
    build_flags: tuple[str, ...]
    output_binary_hash: bytes
    builder: Optional[bytes] = None
    signature: Optional[bytes] = None

    KIND = "provenance"
    _SIG_FIELDS = ("signature",)

    def __post_init__(self) -> None:
        _digest(self.source_hash, "source_hash")
        _digest(self.output_binary_hash, "output_binary_hash")
        _str(self.toolchain_id, "toolchain_id")
        object.__setattr__(self, "build_commands", _strs(self.build_commands, "build_commands"))
        object.__setattr__(self, "build_flags", _strs(self.build_flags, "build_flags"))
        if self.builder is not None and len(self.builder) != 32:
            raise ValueError("builder must be a 32-byte public key")

    @property
    def config(self) -> dict:
        return build_config_dict(self.toolchain_id, self.build_commands, self.build_flags)

    def problems(self) -> list[str]:
        if self.signature is not None and self.builder is None:
            return ["signed provenance without builder key"]
        return []

    def to_dict(self) -> dict:
        return {
            "kind": self.KIND,
            "source_hash": b64e(self.source_hash),
            "toolchain_id": self.toolchain_id,
            "build_commands": list(self.build_commands),
            "build_flags": list(self.build_flags),
            "output_binary_hash": b64e(self.output_binary_hash),
            "builder": _opt_b64(self.builder),
            "signature": _opt_b64(self.signature),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProvenanceStatement":
        return cls(
            source_hash=digest_from_b64(d["source_hash"], "source_hash"),
            toolchain_id=d["toolchain_id"],
            build_commands=tuple(d["build_commands"]),
            build_flags=tuple(d["build_flags"]),
            output_binary_hash=digest_from_b64(d["output_binary_hash"], "output_binary_hash"),
            builder=None if d["builder"] is None else b64d(d["builder"]),
            signature=None if d["signature"] is None else b64d(d["signature"]),
        )


@dataclass(frozen=True)
class Report:
    scope: str
    findings: str
    approved: bool = True

    def __post_init__(self) -> None:
        _str(self.scope, "scope")
        _str(self.findings, "findings")
        if not isinstance(self.approved, bool):
            raise ValueError("approved must be a boolean")

    def to_dict(self) -> dict:
        return {"scope": self.scope, "findings": self.findings, "approved": self.approved}


@dataclass(frozen=True)
class VulnerabilityRecord:
    vuln_type: str
    root_cause: str
    impact: str
    references: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("vuln_type", "root_cause", "impact"):
            _str(getattr(self, name), name)
        object.__setattr__(self, "references", _strs(self.references, "references"))

    def complete(self) -> bool:
        return all((self.vuln_type, self.root_cause, self.impact, self.references))

    def to_dict(self) -> dict:
        return {
            "vuln_type": self.vuln_type,
            "root_cause": self.root_cause,
            "impact": self.impact,
            "references": list(self.references),
        }


@dataclass(frozen=True)
class FollowUp:
    alert_id: bytes
    opinion: str

    def __post_init__(self) -> None:
        _digest(self.alert_id, "alert_id")
        _str(self.opinion, "opinion")

    def to_dict(self) -> dict:
        return {"alert_id": b64e(self.alert_id), "opinion": self.opinion}


CertBody = Union[Report, VulnerabilityRecord, FollowUp]
_BODY_TYPES = {
    CertKind.REPORTING: Report,
    CertKind.ALERTING: VulnerabilityRecord,
    CertKind.FOLLOW_UP: FollowUp,
}


def _body_from_dict(kind: CertKind, d: dict) -> CertBody:
    if kind is CertKind.REPORTING:
        if not isinstance(d["approved"], bool):
            raise EncodingError("approved must be a boolean")
        return Report(d["scope"], d["findings"], d["approved"])
    if kind is CertKind.ALERTING:
        return VulnerabilityRecord(d["vuln_type"], d["root_cause"], d["impact"], tuple(d["references"]))
    return FollowUp(digest_from_b64(d["alert_id"], "alert_id"), d["opinion"])


@dataclass(frozen=True)
class ReviewCertificate(_Statement):
    kind: CertKind
    certifier: CertifierProfile
    subject_binary_hash: bytes
    subject_source_hash: bytes
    body: CertBody
    issued_at: int
    signature: Optional[bytes] = None

    KIND = "review_certificate"
    _SIG_FIELDS = ("signature",)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CertKind(self.kind))
        _digest(self.subject_binary_hash, "subject_binary_hash")
        _digest(self.subject_source_hash, "subject_source_hash")
        _int(self.issued_at, "issued_at")
        if not isinstance(self.body, _BODY_TYPES[self.kind]):
            raise ValueError(f"{self.kind.value} certificate needs a {_BODY_TYPES[self.kind].__name__} body")

    def problems(self) -> list[str]:
        out = []
        method = self.certifier.methodology
        if method is Methodology.REPORTING and self.kind is not CertKind.REPORTING:
            out.append("reporting certifiers issue only reporting certificates")
        if method is Methodology.ALERTING and self.kind is CertKind.REPORTING:
            out.append("alerting certifiers issue only alerting and follow-up certificates")
        if self.kind is CertKind.ALERTING and not self.body.complete():  # type: ignore[union-attr]
            out.append("incomplete vulnerability record")
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.KIND,
            "cert_kind": self.kind.value,
            "certifier": self.certifier.to_dict(),
            "subject_binary_hash": b64e(self.subject_binary_hash),
            "subject_source_hash": b64e(self.subject_source_hash),
            "body": self.body.to_dict(),
            "issued_at": self.issued_at,
            "signature": _opt_b64(self.signature),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewCertificate":
        kind = CertKind(d["cert_kind"])
        return cls(
            kind=kind,
            certifier=CertifierProfile.from_dict(d["certifier"]),
            subject_binary_hash=digest_from_b64(d["subject_binary_hash"], "subject_binary_hash"),
            subject_source_hash=digest_from_b64(d["subject_source_hash"], "subject_source_hash"),
            body=_body_from_dict(kind, d["body"]),
            issued_at=d["issued_at"],
            signature=None if d["signature"] is None else b64d(d["signature"]),
        )


@dataclass(frozen=True)
class RevocationList(_Statement):
    """Revoked statement ids, optionally with whole logs declared untrusted.

    ``distrusted_logs`` carries log origins; monitors use it for global
    revocation after catching a misbehaving log.
    """

    issuer: Identity
    revoked_ids: tuple[bytes, ...]
    issued_at: int
    distrusted_logs: tuple[str, ...] = ()
    signatures: tuple[Signature, ...] = ()

    KIND = "revocation_list"
    _SIG_FIELDS = ("signatures",)

    def __post_init__(self) -> None:
        object.__setattr__(self, "issuer", self.issuer.public())
        ids = {_digest(i, "revoked id") for i in self.revoked_ids}
        object.__setattr__(self, "revoked_ids", tuple(sorted(ids)))
        object.__setattr__(self, "distrusted_logs", tuple(sorted(set(_strs(self.distrusted_logs, "distrusted_logs")))))
        _int(self.issued_at, "issued_at")
        object.__setattr__(self, "signatures", tuple(Signature(*s) for s in self.signatures))

    def to_dict(self) -> dict:
        return {
            "kind": self.KIND,
            "issuer": self.issuer.to_dict(),
            "revoked_ids": [b64e(i) for i in self.revoked_ids],
            "issued_at": self.issued_at,
            "distrusted_logs": list(self.distrusted_logs),
            "signatures": [s.to_dict() for s in self.signatures],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RevocationList":
        return cls(
            issuer=Identity.from_dict(d["issuer"]),
            revoked_ids=tuple(digest_from_b64(i, "revoked id") for i in d["revoked_ids"]),
            issued_at=d["issued_at"],
            distrusted_logs=tuple(d["distrusted_logs"]),
            signatures=tuple(Signature.from_dict(s) for s in d["signatures"]),
        )


Statement = Union[EndorsementStatement, ProvenanceStatement, ReviewCertificate, RevocationList]

_KINDS: dict[str, type] = {
    cls.KIND: cls for cls in (EndorsementStatement, ProvenanceStatement, ReviewCertificate, RevocationList)
}


# ---------------------------------------------------------------------------
# Encoding


def canonical_encode(statement: Statement) -> bytes:
    return statement.encode()


def statement_from_dict(d: dict) -> Statement:
    if not isinstance(d, dict):
        raise EncodingError("statement must be a JSON object")
    cls = _KINDS.get(d.get("kind"))  # type: ignore[arg-type]
    if cls is None:
        raise EncodingError(f"unknown statement kind {d.get('kind')!r}")
    try:
        stmt = cls.from_dict(d)
    except EncodingError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise EncodingError(f"malformed {cls.KIND}: {exc}") from exc
    if stmt.to_dict() != d:
        raise EncodingError(f"{cls.KIND} has unexpected or non-normalized fields")
    return stmt


def decode_statement(data: bytes) -> Statement:
    """Parse canonical bytes; rejects anything not already canonical."""
    return statement_from_dict(parse_canonical(data))


def statement_id(statement: Statement) -> bytes:
    return statement.id


# ---------------------------------------------------------------------------
# Signing and verification

SIGNER_ROLES: dict[type, frozenset[Role]] = {
    EndorsementStatement: frozenset({Role.FIRST_PARTY, Role.CODE_OWNER}),
    ProvenanceStatement: frozenset({Role.BUILDER, Role.CODE_OWNER}),
    ReviewCertificate: frozenset({Role.FIRST_PARTY, Role.THIRD_PARTY, Role.COMMUNITY}),
    RevocationList: frozenset({Role.CODE_OWNER, Role.FIRST_PARTY, Role.MONITOR}),
}


def sign_statement(statement: Statement, identity: Identity) -> Statement:
    """Return a copy of ``statement`` carrying ``identity``'s signature."""
    problems = statement.problems()
    if problems:
        raise ValueError(f"refusing to sign ill-formed {statement.KIND}: {'; '.join(problems)}")
    if identity.role not in SIGNER_ROLES[type(statement)]:
        raise ValueError(f"role {identity.role.value!r} may not sign a {statement.KIND}")
    body = statement.signing_body()
    sig = identity.sign(body)
    if isinstance(statement, (EndorsementStatement, RevocationList)):
        kept = tuple(s for s in statement.signatures if s.public_key != identity.public_key)
        return dataclasses.replace(statement, signatures=kept + (Signature(identity.public_key, sig),))
    if isinstance(statement, ProvenanceStatement):
        if statement.builder is not None and statement.builder != identity.public_key:
            raise ValueError("provenance builder key does not match signer")
        unsigned = dataclasses.replace(statement, builder=identity.public_key, signature=None)
        return dataclasses.replace(unsigned, signature=identity.sign(unsigned.signing_body()))
    if statement.certifier.public_key != identity.public_key:
        raise ValueError("certificate certifier key does not match signer")
    return dataclasses.replace(statement, signature=sig)


class SignerStatus(str, Enum):
    VALID = "valid"
    INVALID = "invalid"
    UNTRUSTED = "untrusted"
    WRONG_ROLE = "wrong_role"


class SignerResult(NamedTuple):
    public_key: bytes
    name: Optional[str]
    status: SignerStatus

    @property
    def ok(self) -> bool:
        return self.status is SignerStatus.VALID


def _signature_pairs(statement: Statement) -> list[Signature]:
    if isinstance(statement, (EndorsementStatement, RevocationList)):
        return list(statement.signatures)
    if isinstance(statement, ProvenanceStatement):
        if statement.signature is None or statement.builder is None:
            return []
        return [Signature(statement.builder, statement.signature)]
    if statement.signature is None:
        return []
    return [Signature(statement.certifier.public_key, statement.signature)]


def verify_signatures(statement: Statement, trust: TrustStore | Iterable[Identity] | None = None) -> list[SignerResult]:
    """Check each signature independently.

    An unknown signer is reported ``untrusted`` without failing the others;
    with ``trust=None`` only cryptographic validity is checked.
    """
    if trust is not None and not isinstance(trust, TrustStore):
        trust = TrustStore(trust)
    body = statement.signing_body()
    roles = SIGNER_ROLES[type(statement)]
    results = []
    for pk, sig in _signature_pairs(statement):
        ident = trust.get(pk) if trust is not None else None
        if not verify_signature(pk, body, sig):
            status = SignerStatus.INVALID
        elif trust is None:
            status = SignerStatus.VALID
        elif ident is None:
            status = SignerStatus.UNTRUSTED
        elif ident.role not in roles:
            status = SignerStatus.WRONG_ROLE
        else:
            status = SignerStatus.VALID
        results.append(SignerResult(pk, ident.name if ident else None, status))
    return results


def valid_signers(statement: Statement, keys: Iterable[bytes]) -> frozenset[bytes]:
    """Distinct keys from ``keys`` holding a cryptographically valid signature."""
    allowed = set(keys)
    body = statement.signing_body()
    return frozenset(
        pk for pk, sig in _signature_pairs(statement) if pk in allowed and verify_signature(pk, body, sig)
    )


# ---------------------------------------------------------------------------
# Revocation


@dataclass(frozen=True)
class CrlSource:
    """A CRL issuer the relying party accepts, possibly a quorum of keys."""

    name: str
    keys: frozenset[bytes]
    threshold: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "keys", frozenset(self.keys))
        if self.threshold < 1:
            raise ValueError("CRL threshold must be at least 1")

    def accepts(self, crl: RevocationList) -> bool:
        return len(valid_signers(crl, self.keys)) >= self.threshold

    def to_dict(self) -> dict:
        return {"name": self.name, "keys": sorted(b64e(k) for k in self.keys), "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "CrlSource":
        return cls(d["name"], frozenset(b64d(k) for k in d["keys"]), d["threshold"])


class RevocationStatus(NamedTuple):
    revoked: bool
    warnings: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.revoked


def accepted_crls(crls: Iterable[RevocationList], sources: Sequence[CrlSource]) -> tuple[list[RevocationList], list[str]]:
    good, warnings = [], []
    for crl in crls:
        if any(src.accepts(crl) for src in sources):
            good.append(crl)
        else:
            warnings.append(f"ignored CRL {b64e(crl.id)[:16]}… issued by {crl.issuer.name}: no trusted quorum of valid signatures")
    return good, warnings


def is_revoked(statement_id: bytes, crls: Iterable[RevocationList], sources: Sequence[CrlSource]) -> RevocationStatus:
    good, warnings = accepted_crls(crls, sources)
    revoked = any(statement_id in crl.revoked_ids for crl in good)
    return RevocationStatus(revoked, tuple(warnings))


def is_log_distrusted(origin: str, crls: Iterable[RevocationList], sources: Sequence[CrlSource]) -> RevocationStatus:
    good, warnings = accepted_crls(crls, sources)
    return RevocationStatus(any(origin in crl.distrusted_logs for crl in good), tuple(warnings))


__all__ = [
    "DAY",
    "DEFAULT_VALIDITY",
    "Category",
    "Methodology",
    "Motivation",
    "CertKind",
    "Signature",
    "CertifierProfile",
    "EndorsementStatement",
    "ProvenanceStatement",
    "Report",
    "VulnerabilityRecord",
    "FollowUp",
    "ReviewCertificate",
    "RevocationList",
    "Statement",
    "build_config_dict",
    "canonical_encode",
    "decode_statement",
    "statement_from_dict",
    "statement_id",
    "sign_statement",
    "verify_signatures",
    "valid_signers",
    "SignerStatus",
    "SignerResult",
    "CrlSource",
    "RevocationStatus",
    "is_revoked",
    "is_log_distrusted",
    "accepted_crls",
]
