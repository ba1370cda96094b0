"""Deterministic identities and statement factories shared by the tests."""

from __future__ import annotations

import hashlib

from hypothesis import strategies as st

from cctransparency.identity import Identity, Role
from cctransparency.statements import (
    Category,
    CertifierProfile,
    CertKind,
    EndorsementStatement,
    FollowUp,
    Methodology,
    Motivation,
    ProvenanceStatement,
    Report,
    ReviewCertificate,
    RevocationList,
    VulnerabilityRecord,
    sign_statement,
)

SEED = b"test-suite"
NOW = 1_700_000_000
DAY = 86_400


def ident(name: str, role: Role) -> Identity:
    return Identity.generate(name, role, SEED)


OPERATOR = ident("operator", Role.LOG_OPERATOR)
OWNER = ident("owner", Role.CODE_OWNER)
FP = ident("fp", Role.FIRST_PARTY)
FP2 = ident("fp2", Role.FIRST_PARTY)
TP = ident("tp", Role.THIRD_PARTY)
TP2 = ident("tp2", Role.THIRD_PARTY)
COMMUNITY = ident("community", Role.COMMUNITY)
RESEARCHER = ident("researcher", Role.THIRD_PARTY)
BUILDER = ident("builder", Role.BUILDER)

FP_PROFILE = CertifierProfile(FP, Category.FIRST_PARTY, Methodology.REPORTING, Motivation.AFFILIATED)
TP_PROFILE = CertifierProfile(TP, Category.THIRD_PARTY, Methodology.REPORTING, Motivation.INDEPENDENT)
TP2_PROFILE = CertifierProfile(TP2, Category.THIRD_PARTY, Methodology.REPORTING, Motivation.INDEPENDENT)
COMMUNITY_PROFILE = CertifierProfile(COMMUNITY, Category.COMMUNITY, Methodology.REPORTING, Motivation.INDEPENDENT)
RESEARCHER_PROFILE = CertifierProfile(RESEARCHER, Category.THIRD_PARTY, Methodology.ALERTING, Motivation.INDEPENDENT)


def digest(label: str | bytes) -> bytes:
    if isinstance(label, str):
        label = label.encode()
    return hashlib.sha256(label).digest()


def endorsement(binary_hash: bytes, *signers: Identity, issued_at: int = NOW, validity: int = 30 * DAY, **kw) -> EndorsementStatement:
    stmt = EndorsementStatement(binary_hash, issued_at, issued_at + validity, **kw)
    for s in signers or (FP,):
        stmt = sign_statement(stmt, s)  # type: ignore[assignment]
    return stmt


def report(profile: CertifierProfile, binary_hash: bytes, *, approved: bool = True, issued_at: int = NOW, source_hash: bytes | None = None) -> ReviewCertificate:
    cert = ReviewCertificate(CertKind.REPORTING, profile, binary_hash, source_hash or digest("src"), Report("full", "ok", approved), issued_at)
    return sign_statement(cert, profile.identity)  # type: ignore[return-value]


def alert(profile: CertifierProfile, binary_hash: bytes, *, issued_at: int = NOW) -> ReviewCertificate:
    body = VulnerabilityRecord("overflow", "missing bounds check", "memory disclosure", ("urn:x",))
    cert = ReviewCertificate(CertKind.ALERTING, profile, binary_hash, digest("src"), body, issued_at)
    return sign_statement(cert, profile.identity)  # type: ignore[return-value]


def followup(profile: CertifierProfile, alert_id: bytes, binary_hash: bytes, *, issued_at: int = NOW) -> ReviewCertificate:
    cert = ReviewCertificate(CertKind.FOLLOW_UP, profile, binary_hash, digest("src2"), FollowUp(alert_id, "fixed"), issued_at)
    return sign_statement(cert, profile.identity)  # type: ignore[return-value]


def crl(issuer: Identity, revoked=(), *, distrusted=(), cosigners=(), issued_at: int = NOW) -> RevocationList:
    stmt = RevocationList(issuer, tuple(revoked), issued_at, tuple(distrusted))
    for s in (issuer, *cosigners):
        stmt = sign_statement(stmt, s)  # type: ignore[assignment]
    return stmt


# -- hypothesis strategies -----------------------------------------------------

digests = st.binary(min_size=32, max_size=32)
text = st.text(max_size=20)
times = st.integers(min_value=0, max_value=2**40)


@st.composite
def endorsements(draw):
    issued = draw(times)
    stmt = EndorsementStatement(
        binary_hash=draw(digests),
        issued_at=issued,
        not_after=issued + draw(st.integers(1, 10**7)),
        claims=draw(text),
        to_be_certified_by=draw(st.none() | times),
        provenance_ref=draw(st.none() | digests),
        version=draw(st.none() | text),
        open_sourced=draw(st.booleans()),
    )
    for s in draw(st.lists(st.sampled_from([FP, FP2, OWNER]), unique=True, min_size=1, max_size=3)):
        stmt = sign_statement(stmt, s)
    return stmt


@st.composite
def provenances(draw):
    stmt = ProvenanceStatement(
        source_hash=draw(digests),
        toolchain_id=draw(text),
        build_commands=tuple(draw(st.lists(text, max_size=3))),
        build_flags=tuple(draw(st.lists(text, max_size=3))),
        output_binary_hash=draw(digests),
    )
    if draw(st.booleans()):
        stmt = sign_statement(stmt, BUILDER)
    return stmt


@st.composite
def certificates(draw):
    kind = draw(st.sampled_from(list(CertKind)))
    if kind is CertKind.REPORTING:
        profile = draw(st.sampled_from([FP_PROFILE, TP_PROFILE, COMMUNITY_PROFILE]))
        body = Report(draw(text), draw(text), draw(st.booleans()))
    elif kind is CertKind.ALERTING:
        profile = RESEARCHER_PROFILE
        body = VulnerabilityRecord(draw(text.filter(bool)), draw(text.filter(bool)), draw(text.filter(bool)), tuple(draw(st.lists(text, min_size=1, max_size=2))))
    else:
        profile = RESEARCHER_PROFILE
        body = FollowUp(draw(digests), draw(text))
    cert = ReviewCertificate(kind, profile, draw(digests), draw(digests), body, draw(times))
    return sign_statement(cert, profile.identity)


@st.composite
def revocation_lists(draw):
    issuer = draw(st.sampled_from([OWNER, FP]))
    stmt = RevocationList(issuer, tuple(draw(st.lists(digests, max_size=4))), draw(times), tuple(draw(st.lists(text, max_size=2))))
    return sign_statement(stmt, issuer)


statements = st.one_of(endorsements(), provenances(), certificates(), revocation_lists())
