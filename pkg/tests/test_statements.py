from __future__ import annotations

import dataclasses
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from helpers import (
    BUILDER,
    COMMUNITY_PROFILE,
    FP,
    FP2,
    FP_PROFILE,
    NOW,
    OWNER,
    RESEARCHER_PROFILE,
    TP,
    TP_PROFILE,
    alert,
    crl,
    digest,
    endorsement,
    followup,
    report,
    statements,
)
from cctransparency.encoding import EncodingError, b64d, b64e, canonical_json, parse_canonical, parse_json
from cctransparency.identity import Identity, Role, TrustStore, load_key, save_key, verify_signature
from cctransparency.statements import (
    Category,
    CertifierProfile,
    CertKind,
    CrlSource,
    EndorsementStatement,
    Methodology,
    Motivation,
    ProvenanceStatement,
    Report,
    ReviewCertificate,
    RevocationList,
    SignerStatus,
    VulnerabilityRecord,
    decode_statement,
    is_log_distrusted,
    is_revoked,
    sign_statement,
    valid_signers,
    verify_signatures,
)

# -- canonical encoding ---------------------------------------------------------


def test_canonical_json_is_sorted_and_compact():
    assert canonical_json({"b": 1, "a": [True, None, "é"]}) == '{"a":[true,null,"é"],"b":1}'.encode()


@pytest.mark.parametrize("value", [1.5, {1: "x"}, b"raw", {"a": {1, 2}}])
def test_canonical_json_rejects_unrepresentable(value):
    with pytest.raises(EncodingError):
        canonical_json(value)


@pytest.mark.parametrize(
    "data",
    [b'{"a":1,"a":2}', b'{"a":1.0}', b'{"a":NaN}', b"\xff", b'{"a":'],
)
def test_strict_parser_rejects(data):
    with pytest.raises(EncodingError):
        parse_json(data)


def test_parse_canonical_rejects_whitespace_and_order():
    assert parse_canonical(b'{"a":1,"b":2}') == {"a": 1, "b": 2}
    for bad in [b'{"b":2,"a":1}', b'{"a": 1}', b' {"a":1}']:
        with pytest.raises(EncodingError):
            parse_canonical(bad)


def test_base64_is_strict():
    assert b64d(b64e(b"\x00\x01")) == b"\x00\x01"
    for bad in ["AAE", "AAE=\n", "AA E=", "AAF=", 5]:
        with pytest.raises(EncodingError):
            b64d(bad)  # type: ignore[arg-type]


# -- identities -----------------------------------------------------------------


def test_deterministic_keys_and_signatures():
    a = Identity.generate("alice", Role.FIRST_PARTY, b"seed")
    b = Identity.generate("alice", Role.FIRST_PARTY, b"seed")
    assert a.public_key == b.public_key
    assert Identity.generate("bob", Role.FIRST_PARTY, b"seed").public_key != a.public_key
    sig = a.sign(b"msg")
    assert verify_signature(a.public_key, b"msg", sig)
    assert not verify_signature(a.public_key, b"msg2", sig)
    assert not verify_signature(a.public_key[:31], b"msg", sig)
    assert not verify_signature(a.public_key, b"msg", sig[:63])


def test_public_identity_cannot_sign():
    pub = FP.public()
    assert not pub.can_sign and pub == FP
    with pytest.raises(PermissionError):
        pub.sign(b"x")


def test_mismatched_private_key_rejected():
    with pytest.raises(ValueError):
        Identity("x", Role.FIRST_PARTY, FP.public_key, TP.private_key)


def test_key_file_roundtrip(tmp_path):
    save_key(FP, tmp_path / "fp.key")
    save_key(FP, tmp_path / "fp.pub", private=False)
    assert (tmp_path / "fp.key").read_text().startswith("cct-ed25519-private first_party fp\n")
    loaded = load_key(tmp_path / "fp.key")
    assert loaded.can_sign and loaded.public_key == FP.public_key
    pub = load_key(tmp_path / "fp.pub")
    assert not pub.can_sign and pub.public_key == FP.public_key
    (tmp_path / "bad.key").write_text("garbage\n")
    with pytest.raises(EncodingError):
        load_key(tmp_path / "bad.key")


def test_trust_store_roles():
    store = TrustStore([FP, TP, OWNER])
    assert FP.public_key in store and len(store) == 3
    assert store.keys_with_role(Role.FIRST_PARTY, Role.CODE_OWNER) == {FP.public_key, OWNER.public_key}


# -- statements -----------------------------------------------------------------


@settings(max_examples=250, deadline=None)
@given(stmt=statements)
def test_statement_roundtrip_is_byte_identical(stmt):
    data = stmt.encode()
    back = decode_statement(data)
    assert back == stmt
    assert back.encode() == data
    assert back.id == stmt.id
    assert all(r.ok for r in verify_signatures(back))


def test_thousand_random_statements_roundtrip():
    rng = random.Random(5)
    seen = set()
    for i in range(1000):
        stmt = _random_statement(rng)
        data = stmt.encode()
        assert decode_statement(data).encode() == data
        seen.add(stmt.KIND)
    assert seen == {"endorsement", "provenance", "review_certificate", "revocation_list"}


def _random_statement(rng: random.Random):
    kind = rng.randrange(4)
    h = rng.randbytes(32)
    if kind == 0:
        return endorsement(h, FP, issued_at=rng.randrange(10**9), version=str(rng.randrange(100)), open_sourced=rng.random() < 0.5)
    if kind == 1:
        prov = ProvenanceStatement(rng.randbytes(32), f"tc-{rng.randrange(9)}", ("make",), ("-O2",), h)
        return sign_statement(prov, BUILDER) if rng.random() < 0.5 else prov
    if kind == 2:
        return report(rng.choice([FP_PROFILE, TP_PROFILE, COMMUNITY_PROFILE]), h, approved=rng.random() < 0.8)
    return crl(OWNER, [h, rng.randbytes(32)])


@settings(max_examples=120, deadline=None)
@given(stmt=statements, data=st.data())
def test_any_bit_flip_breaks_decoding_or_signatures(stmt, data):
    raw = bytearray(stmt.encode())
    pos = data.draw(st.integers(0, len(raw) - 1))
    bit = data.draw(st.integers(0, 7))
    raw[pos] ^= 1 << bit
    try:
        mutated = decode_statement(bytes(raw))
    except EncodingError:
        return
    if mutated == stmt:
        pytest.fail("bit flip produced an equal statement")
    results = verify_signatures(mutated)
    unsigned = isinstance(mutated, ProvenanceStatement) and mutated.signature is None and getattr(stmt, "signature", None) is None
    # An unsigned provenance has nothing to break; everything else must fail.
    assert unsigned or not results or not all(r.ok for r in results)


def test_signature_fields_excluded_from_signing_body():
    e = endorsement(digest("bin"), FP)
    e2 = sign_statement(e, FP2)
    assert e.signing_body() == e2.signing_body()
    assert e.id != e2.id
    assert len(e2.signatures) == 2
    assert sign_statement(e2, FP).signatures[-1].public_key == FP.public_key
    assert len(sign_statement(e2, FP).signatures) == 2


def test_decode_rejects_extra_or_mistyped_fields():
    e = endorsement(digest("bin"), FP)
    d = e.to_dict()
    for mutate in [
        lambda x: x.update(extra=1),
        lambda x: x.update(issued_at="1"),
        lambda x: x.update(version=3),
        lambda x: x.update(open_sourced=1),
        lambda x: x.pop("claims"),
        lambda x: x.update(kind="unknown"),
        lambda x: x.update(binary_hash=b64e(b"short")),
    ]:
        bad = json.loads(json.dumps(d))
        mutate(bad)
        with pytest.raises(EncodingError):
            decode_statement(canonical_json(bad))


def test_malformed_validity_window_refused_for_signing():
    stmt = EndorsementStatement(digest("bin"), NOW, NOW)
    assert stmt.problems() == ["malformed validity window"]
    with pytest.raises(ValueError):
        sign_statement(stmt, FP)


def test_validity_window_half_open():
    e = endorsement(digest("bin"), FP, issued_at=100, validity=10)
    assert not e.valid_at(99) and e.valid_at(100) and e.valid_at(109) and not e.valid_at(110)


def test_signer_roles_enforced():
    stmt = EndorsementStatement(digest("bin"), NOW, NOW + 10)
    with pytest.raises(ValueError):
        sign_statement(stmt, TP)
    prov = ProvenanceStatement(digest("s"), "tc", (), (), digest("b"))
    with pytest.raises(ValueError):
        sign_statement(prov, FP)
    with pytest.raises(ValueError):
        sign_statement(report(TP_PROFILE, digest("b")), FP)


def test_verify_signatures_statuses():
    e = endorsement(digest("bin"), FP, OWNER)
    store = TrustStore([FP.public()])
    statuses = {r.public_key: r.status for r in verify_signatures(e, store)}
    assert statuses == {FP.public_key: SignerStatus.VALID, OWNER.public_key: SignerStatus.UNTRUSTED}
    wrong = TrustStore([Identity(FP.name, Role.THIRD_PARTY, FP.public_key)])
    assert verify_signatures(e, wrong)[0].status is SignerStatus.WRONG_ROLE
    forged = dataclasses.replace(e, claims="something else")
    assert all(r.status is SignerStatus.INVALID for r in verify_signatures(forged))
    assert valid_signers(e, [FP.public_key, TP.public_key]) == {FP.public_key}


# -- certifiers -----------------------------------------------------------------


@pytest.mark.parametrize("motive", [Motivation.INDEPENDENT])
def test_first_party_certifiers_are_affiliated(motive):
    with pytest.raises(ValueError):
        CertifierProfile(FP, Category.FIRST_PARTY, Methodology.REPORTING, motive)


@settings(max_examples=50, deadline=None)
@given(
    category=st.sampled_from(list(Category)),
    method=st.sampled_from(list(Methodology)),
    motive=st.sampled_from(list(Motivation)),
    role=st.sampled_from([Role.FIRST_PARTY, Role.THIRD_PARTY, Role.COMMUNITY]),
)
def test_certifier_profile_invariants(category, method, motive, role):
    who = Identity.generate("c", role, b"s")
    valid = role.value == category.value and not (category is Category.FIRST_PARTY and motive is not Motivation.AFFILIATED)
    if valid:
        assert CertifierProfile(who, category, method, motive).category is category
    else:
        with pytest.raises(ValueError):
            CertifierProfile(who, category, method, motive)


def test_certificate_kind_must_match_methodology():
    cert = ReviewCertificate(CertKind.ALERTING, TP_PROFILE, digest("b"), digest("s"), VulnerabilityRecord("a", "b", "c", ("d",)), NOW)
    assert cert.problems()
    with pytest.raises(ValueError):
        sign_statement(cert, TP)
    incomplete = ReviewCertificate(CertKind.ALERTING, RESEARCHER_PROFILE, digest("b"), digest("s"), VulnerabilityRecord("a", "", "c"), NOW)
    assert "incomplete vulnerability record" in incomplete.problems()
    with pytest.raises(ValueError):
        ReviewCertificate(CertKind.REPORTING, TP_PROFILE, digest("b"), digest("s"), VulnerabilityRecord("a", "b", "c"), NOW)


def test_followup_references_alert():
    a = alert(RESEARCHER_PROFILE, digest("b"))
    f = followup(RESEARCHER_PROFILE, a.id, digest("b2"))
    assert f.body.alert_id == a.id
    assert decode_statement(f.encode()) == f


# -- revocation -----------------------------------------------------------------


def test_crl_threshold_and_sources():
    target = digest("endorsement-id")
    single = crl(OWNER, [target])
    source = CrlSource("owner", frozenset({OWNER.public_key}))
    assert is_revoked(target, [single], [source])
    assert not is_revoked(digest("other"), [single], [source])
    quorum = CrlSource("quorum", frozenset({OWNER.public_key, FP.public_key}), threshold=2)
    status = is_revoked(target, [single], [quorum])
    assert not status and status.warnings
    double = crl(OWNER, [target], cosigners=[FP])
    assert is_revoked(target, [double], [quorum])
    forged = dataclasses.replace(double, revoked_ids=(digest("x"),))
    assert not is_revoked(digest("x"), [forged], [quorum])


def test_crl_normalizes_ids_and_distrusts_logs():
    a, b = digest("a"), digest("b")
    lst = RevocationList(OWNER, (b, a, b), NOW, ("log-b", "log-a"))
    assert lst.revoked_ids == tuple(sorted((a, b)))
    assert lst.distrusted_logs == ("log-a", "log-b")
    signed = crl(OWNER, [a], distrusted=["log-x"])
    assert is_log_distrusted("log-x", [signed], [CrlSource("o", frozenset({OWNER.public_key}))])
    assert not is_log_distrusted("log-y", [signed], [CrlSource("o", frozenset({OWNER.public_key}))])


def test_crl_source_requires_positive_threshold():
    with pytest.raises(ValueError):
        CrlSource("x", frozenset(), threshold=0)


def test_report_approval_flag_roundtrip():
    cert = report(COMMUNITY_PROFILE, digest("b"), approved=False)
    back = decode_statement(cert.encode())
    assert isinstance(back.body, Report) and back.body.approved is False
