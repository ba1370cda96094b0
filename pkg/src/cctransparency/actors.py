"""Actor flows: code owner, certifiers, and trusted builders.

Builds are simulated by a deterministic function of the source and the
build configuration::

    binary_hash = SHA-256(b"bin" || source_hash || canonical_json(config))

where ``config`` is ``{"toolchain_id", "build_commands", "build_flags"}``.
That is enough to give reproducibility (same inputs, same bytes) and input
sensitivity (any change, different bytes). Reviews are simulated too: a
certifier finds a defect iff the source's planted defect tag is on its
detection list.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .encoding import EncodingError, b64e, canonical_json, sha256
from .identity import Identity, Role
from .logservice import LogClient
from .statements import (
    DEFAULT_VALIDITY,
    Category,
    CertifierProfile,
    CertKind,
    EndorsementStatement,
    FollowUp,
    Methodology,
    ProvenanceStatement,
    Report,
    ReviewCertificate,
    Statement,
    VulnerabilityRecord,
    build_config_dict,
    decode_statement,
    sign_statement,
    valid_signers,
)

log = logging.getLogger(__name__)


class ReleaseAborted(Exception):
    pass


class RebuildMismatch(Exception):
    """A rebuild did not reproduce the claimed binary."""

    def __init__(self, reason: str, expected: bytes | None = None, rebuilt: bytes | None = None) -> None:
        super().__init__(reason)
        self.reason = reason
        self.expected = expected
        self.rebuilt = rebuilt


class DanglingReference(LookupError):
    pass


# ---------------------------------------------------------------------------
# Sources and builds


@dataclass(frozen=True)
class SourcePackage:
    content: bytes
    open_sourced: bool = False
    planted_defect: Optional[str] = None  # test knob: a defect reviewers may find
    source_hash: bytes = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "source_hash", sha256(self.content))


@dataclass(frozen=True)
class BuildConfig:
    toolchain_id: str
    build_commands: tuple[str, ...] = ()
    build_flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "build_commands", tuple(self.build_commands))
        object.__setattr__(self, "build_flags", tuple(self.build_flags))

    def to_dict(self) -> dict:
        return build_config_dict(self.toolchain_id, self.build_commands, self.build_flags)

    @classmethod
    def from_provenance(cls, prov: ProvenanceStatement) -> "BuildConfig":
        return cls(prov.toolchain_id, prov.build_commands, prov.build_flags)


def binary_hash_for(source_hash: bytes, config: BuildConfig) -> bytes:
    return sha256(b"bin" + source_hash + canonical_json(config.to_dict()))


@dataclass(frozen=True)
class BuildResult:
    binary_hash: bytes
    provenance: ProvenanceStatement


def build(source: SourcePackage, config: BuildConfig, builder: Identity | None = None) -> BuildResult:
    """Deterministic build; with ``builder`` the provenance is signed."""
    binary = binary_hash_for(source.source_hash, config)
    prov = ProvenanceStatement(
        source_hash=source.source_hash,
        toolchain_id=config.toolchain_id,
        build_commands=config.build_commands,
        build_flags=config.build_flags,
        output_binary_hash=binary,
    )
    if builder is not None:
        prov = sign_statement(prov, builder)
    return BuildResult(binary, prov)


# ---------------------------------------------------------------------------
# Actors


@dataclass(frozen=True)
class ReviewVerdict:
    approved: bool
    findings: str
    discovered_defect: Optional[str] = None


@dataclass(frozen=True)
class Certifier:
    profile: CertifierProfile
    detects: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "detects", frozenset(self.detects))

    @property
    def identity(self) -> Identity:
        return self.profile.identity

    @property
    def name(self) -> str:
        return self.identity.name

    def review(self, source: SourcePackage) -> ReviewVerdict:
        defect = source.planted_defect
        if defect is not None and defect in self.detects:
            return ReviewVerdict(False, f"found {defect} in source {source.source_hash.hex()[:16]}", defect)
        return ReviewVerdict(True, f"no issues found in source {source.source_hash.hex()[:16]}")


@dataclass(frozen=True)
class CodeOwner:
    identity: Identity

    def __post_init__(self) -> None:
        if self.identity.role is not Role.CODE_OWNER:
            raise ValueError("code owner identity must have role code_owner")


@dataclass(frozen=True)
class TrustedBuilder:
    identity: Identity
    misreport: bool = False  # test knob: sign a provenance with a wrong output hash

    def run(self, source: SourcePackage, config: BuildConfig, log_: LogClient) -> tuple[BuildResult, int]:
        result = build(source, config)
        prov = result.provenance
        if self.misreport:
            prov = ProvenanceStatement(
                prov.source_hash, prov.toolchain_id, prov.build_commands, prov.build_flags,
                sha256(b"tampered" + prov.output_binary_hash),
            )
        prov = sign_statement(prov, self.identity)
        index = log_.append(prov.encode())
        return BuildResult(result.binary_hash, prov), index


# ---------------------------------------------------------------------------
# Log helpers


def scan_log(log_: LogClient, size: int | None = None) -> list[tuple[int, Statement]]:
    """Decode every well-formed statement on the log, in order."""
    if size is None:
        size = log_.checkpoint().tree_size
    out = []
    for i, payload in enumerate(log_.entries(0, size)):
        try:
            out.append((i, decode_statement(payload)))
        except EncodingError:
            log.debug("skipping undecodable entry %d", i)
    return out


def find_by_id(log_: LogClient, statement_id: bytes) -> tuple[int, Statement] | None:
    for index, stmt in scan_log(log_):
        if stmt.id == statement_id:
            return index, stmt
    return None


# ---------------------------------------------------------------------------
# Flows


@dataclass(frozen=True)
class Release:
    index: int
    statement_id: bytes
    endorsement: EndorsementStatement
    build: BuildResult


def _endorse(
    binary_hash: bytes,
    signers: Sequence[Identity],
    now: int,
    *,
    validity: int,
    claims: str,
    version: str | None,
    to_be_certified_by: int | None,
    provenance_ref: bytes | None,
    open_sourced: bool,
) -> EndorsementStatement:
    stmt = EndorsementStatement(
        binary_hash=binary_hash,
        issued_at=now,
        not_after=now + validity,
        claims=claims,
        to_be_certified_by=to_be_certified_by,
        provenance_ref=provenance_ref,
        version=version,
        open_sourced=open_sourced,
    )
    for signer in signers:
        stmt = sign_statement(stmt, signer)
    return stmt


def release_l1(
    owner: CodeOwner,
    source: SourcePackage,
    config: BuildConfig,
    log_: LogClient,
    certifiers: Sequence[Certifier],
    now: int,
    *,
    validity: int = DEFAULT_VALIDITY,
    version: str | None = None,
    to_be_certified_by: int | None = None,
    claims: str = "approved for production use",
) -> Release:
    """First-party review, owner build, and a multi-signed endorsement."""
    if not certifiers:
        raise ReleaseAborted("at least one first-party certifier is required")
    for c in certifiers:
        if c.profile.category is not Category.FIRST_PARTY:
            raise ReleaseAborted(f"{c.name} is not a first-party certifier")
    rejections = [(c.name, v) for c in certifiers if not (v := c.review(source)).approved]
    if rejections:
        names = ", ".join(n for n, _ in rejections)
        raise ReleaseAborted(f"release not approved by {names}: {rejections[0][1].findings}")
    result = build(source, config)
    stmt = _endorse(
        result.binary_hash,
        [c.identity for c in certifiers],
        now,
        validity=validity,
        claims=claims,
        version=version,
        to_be_certified_by=to_be_certified_by,
        provenance_ref=None,
        open_sourced=source.open_sourced,
    )
    index = log_.append(stmt.encode())
    log.info("%s released %s at log index %d", owner.identity.name, result.binary_hash.hex()[:16], index)
    return Release(index, stmt.id, stmt, result)


def _find_endorsements(log_: LogClient, binary_hash: bytes) -> list[tuple[int, EndorsementStatement]]:
    return [
        (i, s) for i, s in scan_log(log_)
        if isinstance(s, EndorsementStatement) and s.binary_hash == binary_hash
    ]


def _certificate_for(certifier: Certifier, source: SourcePackage, binary_hash: bytes, verdict: ReviewVerdict, now: int, scope: str) -> ReviewCertificate | None:
    method = certifier.profile.methodology
    if method is Methodology.REPORTING:
        body = Report(scope=scope, findings=verdict.findings, approved=verdict.approved)
        kind = CertKind.REPORTING
    elif verdict.discovered_defect is not None:
        defect = verdict.discovered_defect
        body = VulnerabilityRecord(
            vuln_type=defect,
            root_cause=f"{defect} introduced in source {source.source_hash.hex()[:16]}",
            impact="confidentiality and integrity of data processed by the binary",
            references=(f"urn:cct:defect:{defect}", f"urn:cct:binary:{b64e(binary_hash)}"),
        )
        kind = CertKind.ALERTING
    else:
        return None
    cert = ReviewCertificate(kind, certifier.profile, binary_hash, source.source_hash, body, now)
    return sign_statement(cert, certifier.identity)  # type: ignore[return-value]


def third_party_review(
    certifier: Certifier,
    source: SourcePackage,
    provenance: ProvenanceStatement,
    log_: LogClient,
    now: int,
    *,
    scope: str = "full source review and independent rebuild",
) -> tuple[int, ReviewCertificate] | None:
    """Rebuild from provenance, compare with the endorsed binary, certify.

    Returns the logged certificate, or ``None`` for an alerting certifier
    that found nothing to report.
    """
    if certifier.profile.category not in (Category.THIRD_PARTY, Category.COMMUNITY):
        raise ValueError(f"{certifier.name} is not a third-party or community certifier")
    if certifier.profile.category is Category.COMMUNITY and not source.open_sourced:
        raise PermissionError("community certifiers only review open-sourced code")
    if provenance.source_hash != source.source_hash:
        raise RebuildMismatch("provenance refers to a different source", provenance.source_hash, source.source_hash)
    rebuilt = build(source, BuildConfig.from_provenance(provenance)).binary_hash
    if rebuilt != provenance.output_binary_hash:
        raise RebuildMismatch("rebuild does not reproduce the provenance output", provenance.output_binary_hash, rebuilt)
    if not _find_endorsements(log_, rebuilt):
        raise RebuildMismatch("no endorsement on the log for the rebuilt binary", None, rebuilt)
    verdict = certifier.review(source)
    cert = _certificate_for(certifier, source, rebuilt, verdict, now, scope)
    if cert is None:
        return None
    return log_.append(cert.encode()), cert


def report_vulnerability(
    certifier: Certifier,
    source: SourcePackage,
    binary_hash: bytes,
    log_: LogClient,
    now: int,
) -> tuple[int, ReviewCertificate] | None:
    """Post-release review by an alerting certifier of any category.

    This is how first-party researchers publish alerts on an already
    endorsed binary without a rebuild step.
    """
    if certifier.profile.methodology is not Methodology.ALERTING:
        raise ValueError(f"{certifier.name} is not an alerting certifier")
    verdict = certifier.review(source)
    cert = _certificate_for(certifier, source, binary_hash, verdict, now, scope="post-release review")
    if cert is None:
        return None
    return log_.append(cert.encode()), cert


def issue_followup(
    certifier: Certifier,
    alert_id: bytes,
    patched_binary_hash: bytes,
    opinion: str,
    log_: LogClient,
    now: int,
    *,
    patched_source_hash: bytes | None = None,
) -> tuple[int, ReviewCertificate]:
    if certifier.profile.methodology is not Methodology.ALERTING:
        raise ValueError("only alerting certifiers issue follow-up certificates")
    found = find_by_id(log_, alert_id)
    if found is None:
        raise DanglingReference(f"no alerting certificate {alert_id.hex()} on the log")
    _, alert = found
    if not isinstance(alert, ReviewCertificate) or alert.kind is not CertKind.ALERTING:
        raise DanglingReference(f"statement {alert_id.hex()} is not an alerting certificate")
    cert = ReviewCertificate(
        CertKind.FOLLOW_UP,
        certifier.profile,
        patched_binary_hash,
        patched_source_hash or alert.subject_source_hash,
        FollowUp(alert_id, opinion),
        now,
    )
    cert = sign_statement(cert, certifier.identity)  # type: ignore[assignment]
    return log_.append(cert.encode()), cert


@dataclass(frozen=True)
class TrustedRelease:
    provenance_indices: tuple[int, ...]
    provenance_ids: tuple[bytes, ...]
    endorsement_index: int
    endorsement_id: bytes
    endorsement: EndorsementStatement
    binary_hash: bytes


def trusted_build_release(
    owner: CodeOwner,
    source: SourcePackage,
    config: BuildConfig,
    builders: Sequence[TrustedBuilder],
    log_: LogClient,
    now: int,
    *,
    trusted_builder_keys: Iterable[bytes] | None = None,
    co_signers: Sequence[Identity] = (),
    validity: int = DEFAULT_VALIDITY,
    version: str | None = None,
) -> TrustedRelease:
    """Release through one or more trusted builders.

    Each builder logs a signed provenance statement and hands back the
    binary. The owner checks every signature and every provenance field,
    requires all binaries to be identical, then endorses once with a
    pointer to the first logged provenance.
    """
    if not builders:
        raise ReleaseAborted("no trusted builders given")
    trusted = set(trusted_builder_keys) if trusted_builder_keys is not None else {b.identity.public_key for b in builders}
    expected_config = config.to_dict()
    outputs: list[tuple[BuildResult, int]] = [b.run(source, config, log_) for b in builders]
    for (res, _), builder in zip(outputs, builders):
        prov = res.provenance
        if prov.builder not in trusted or not valid_signers(prov, trusted):
            raise ReleaseAborted(f"provenance from {builder.identity.name} has no valid trusted signature")
        if prov.source_hash != source.source_hash or prov.config != expected_config:
            raise ReleaseAborted(f"provenance from {builder.identity.name} describes a different build")
        if prov.output_binary_hash != res.binary_hash:
            raise ReleaseAborted(f"provenance from {builder.identity.name} misreports the output binary")
    binaries = {res.binary_hash for res, _ in outputs}
    if len(binaries) != 1:
        raise ReleaseAborted("builders produced different binaries; build is not reproducible")
    binary = binaries.pop()
    first_prov = outputs[0][0].provenance
    stmt = _endorse(
        binary,
        [owner.identity, *co_signers],
        now,
        validity=validity,
        claims="built by trusted builders",
        version=version,
        to_be_certified_by=None,
        provenance_ref=first_prov.id,
        open_sourced=source.open_sourced,
    )
    index = log_.append(stmt.encode())
    return TrustedRelease(
        tuple(i for _, i in outputs),
        tuple(res.provenance.id for res, _ in outputs),
        index,
        stmt.id,
        stmt,
        binary,
    )


@dataclass(frozen=True)
class LinkageCheck:
    ok: bool
    reason: str
    endorsement: EndorsementStatement | None = None
    provenance: ProvenanceStatement | None = None


def verify_build_linkage(
    binary_hash: bytes,
    source_hash: bytes,
    log_: LogClient,
    *,
    builder_keys: Iterable[bytes],
    endorser_keys: Iterable[bytes],
) -> LinkageCheck:
    """Certifier-side check that a binary came from reviewed source, no rebuild.

    Requires an endorsement for ``binary_hash`` with a valid trusted
    signature whose ``provenance_ref`` resolves on the log to a validly
    signed provenance naming the same binary and ``source_hash``.
    """
    builder_keys, endorser_keys = set(builder_keys), set(endorser_keys)
    statements = scan_log(log_)
    by_id = {s.id: s for _, s in statements}
    last_reason = "no endorsement for binary"
    for _, stmt in statements:
        if not isinstance(stmt, EndorsementStatement) or stmt.binary_hash != binary_hash:
            continue
        if not valid_signers(stmt, endorser_keys):
            last_reason = "endorsement lacks a valid trusted signature"
            continue
        if stmt.provenance_ref is None:
            last_reason = "endorsement carries no provenance reference"
            continue
        prov = by_id.get(stmt.provenance_ref)
        if not isinstance(prov, ProvenanceStatement):
            last_reason = "provenance reference does not resolve on the log"
            continue
        if not valid_signers(prov, builder_keys):
            last_reason = "provenance lacks a valid trusted builder signature"
            continue
        if prov.output_binary_hash != binary_hash:
            last_reason = "provenance output does not match endorsed binary"
            continue
        if prov.source_hash != source_hash:
            last_reason = "provenance source does not match reviewed source"
            continue
        return LinkageCheck(True, "linked", stmt, prov)
    return LinkageCheck(False, last_reason)


def certify_from_linkage(
    certifier: Certifier,
    source: SourcePackage,
    binary_hash: bytes,
    log_: LogClient,
    now: int,
    *,
    builder_keys: Iterable[bytes],
    endorser_keys: Iterable[bytes],
) -> tuple[int, ReviewCertificate] | None:
    """Certify a trusted-builder release after checking linkage instead of rebuilding."""
    if certifier.profile.category is Category.COMMUNITY and not source.open_sourced:
        raise PermissionError("community certifiers only review open-sourced code")
    check = verify_build_linkage(
        binary_hash, source.source_hash, log_, builder_keys=builder_keys, endorser_keys=endorser_keys
    )
    if not check.ok:
        raise RebuildMismatch(check.reason, binary_hash, None)
    cert = _certificate_for(certifier, source, binary_hash, certifier.review(source), now, "source review; build linkage via trusted builder provenance")
    if cert is None:
        return None
    return log_.append(cert.encode()), cert
