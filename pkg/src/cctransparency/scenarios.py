"""Named end-to-end scenarios, one per release, review, or attack flow.

Every scenario runs against an in-process log service with a virtual
clock, derives all keys and sources from a seed, and compares what it
observed with a fixed expected outcome. Nothing reads the wall clock.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .actors import (
    BuildConfig,
    Certifier,
    CodeOwner,
    SourcePackage,
    TrustedBuilder,
    certify_from_linkage,
    find_by_id,
    issue_followup,
    release_l1,
    report_vulnerability,
    scan_log,
    third_party_review,
    trusted_build_release,
)
from .auditor import AuditPolicy, AuditVerdict, EvidenceClaim, Level, decide
from .encoding import canonical_json, parse_canonical
from .identity import Identity, Role
from .logservice import LogClient, LogService, Mode, ServiceConfig
from .monitor import AlarmKind, Monitor, collective_revocation, connect, gossip_round, verify_alarm
from .statements import (
    DAY,
    Category,
    CertifierProfile,
    CrlSource,
    EndorsementStatement,
    Methodology,
    Motivation,
    ProvenanceStatement,
    ReviewCertificate,
    RevocationList,
    sign_statement,
    valid_signers,
)

DEFAULT_NOW = 1_700_000_000
DEFAULT_SEED = 7


class Clock:
    """Virtual clock; scenarios advance it explicitly."""

    def __init__(self, now: int) -> None:
        self.now = now

    def __call__(self) -> int:
        return self.now

    def advance(self, seconds: int) -> int:
        self.now += seconds
        return self.now


class World:
    """Identities, a log service, and helpers shared by every scenario."""

    def __init__(self, seed: int, now: int, config: ServiceConfig | None = None) -> None:
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = Clock(now)
        self._seed_bytes = seed.to_bytes(8, "big", signed=True)
        self.operator = self.identity("log-operator", Role.LOG_OPERATOR)
        self.service = LogService(config or ServiceConfig(), self.operator, clock=self.clock)
        self.log = LogClient.local(self.service)
        self.owner = CodeOwner(self.identity("owner", Role.CODE_OWNER))
        self.first_party = self.certifier("fp-reviewer", Category.FIRST_PARTY, Methodology.REPORTING, Motivation.AFFILIATED)
        self.third_party = self.certifier("tp-auditor", Category.THIRD_PARTY, Methodology.REPORTING, Motivation.INDEPENDENT)
        self.community = self.certifier("community-reviewer", Category.COMMUNITY, Methodology.REPORTING, Motivation.INDEPENDENT)
        self.config = BuildConfig("cc-toolchain-1.0", ("configure", "make release"), ("-O2", "-fstack-protector"))

    def identity(self, name: str, role: Role) -> Identity:
        return Identity.generate(name, role, self._seed_bytes)

    def certifier(self, name: str, category: Category, method: Methodology, motive: Motivation, detects: Sequence[str] = ()) -> Certifier:
        role = Role(category.value)

        return Certifier(CertifierProfile(self.identity(name, role), category, method, motive), frozenset(detects))

    def source(self, label: str, *, open_sourced: bool = False, defect: str | None = None) -> SourcePackage:
        body = f"{label}\n".encode() + self.rng.randbytes(64)
        return SourcePackage(body, open_sourced, defect)

    @property
    def now(self) -> int:
        return self.clock.now

    def policy(self, required: Level, *, extra_third: Sequence[Certifier] = (), crl_sources: Sequence[CrlSource] = (), **kw: Any) -> AuditPolicy:
        return AuditPolicy(
            trusted_log_key=self.operator.public_key,
            origin=self.service.origin,
            now=self.now,
            first_party_keys=frozenset({self.first_party.identity.public_key, self.owner.identity.public_key}),
            third_party_keys=frozenset({self.third_party.identity.public_key, *(c.identity.public_key for c in extra_third)}),
            community_keys=frozenset({self.community.identity.public_key}),
            required_level=required,
            crl_sources=tuple(crl_sources),
            **kw,
        )

    def audit(self, binary_hash: bytes, policy: AuditPolicy, log: LogClient | None = None, extra_crls: Sequence[RevocationList] = ()) -> AuditVerdict:
        return decide(EvidenceClaim(binary_hash), log or self.log, policy, extra_crls)


def _verdict(v: AuditVerdict) -> dict:
    return {"status": v.status.value, "level": v.achieved_level.name, "reasons": list(v.reasons)}


# ---------------------------------------------------------------------------
# Scenario bodies; each returns the observed outcome as plain data.


def _honest_l1(w: World) -> dict:
    src = w.source("service v1")
    rel = release_l1(w.owner, src, w.config, w.log, [w.first_party], w.now, version="1.0.0")
    w.clock.advance(60)
    v = w.audit(rel.build.binary_hash, w.policy(Level.L1))
    proof = w.log.inclusion_proof(rel.index, w.log.checkpoint().tree_size)
    return {"verdict": _verdict(v), "inclusion_path_length": len(proof.audit_path), "endorsement_signers": len(rel.endorsement.signatures)}


def _honest_l2(w: World) -> dict:
    src = w.source("service v1")
    rel = release_l1(w.owner, src, w.config, w.log, [w.first_party], w.now, version="1.0.0")
    w.clock.advance(DAY)
    index, cert = third_party_review(w.third_party, src, rel.build.provenance, w.log, w.now)  # type: ignore[misc]
    w.clock.advance(60)
    v = w.audit(rel.build.binary_hash, w.policy(Level.L2))
    return {"verdict": _verdict(v), "certificate_subject_matches": cert.subject_binary_hash == rel.build.binary_hash}


def _honest_l3(w: World) -> dict:
    src = w.source("service v1", open_sourced=True)
    rel = release_l1(w.owner, src, w.config, w.log, [w.first_party], w.now, version="1.0.0")
    w.clock.advance(DAY)
    third_party_review(w.third_party, src, rel.build.provenance, w.log, w.now)
    third_party_review(w.community, src, rel.build.provenance, w.log, w.now)
    w.clock.advance(60)
    v = w.audit(rel.build.binary_hash, w.policy(Level.L3))

    present = set()
    for _, s in scan_log(w.log):
        if isinstance(s, EndorsementStatement) and valid_signers(s, [w.first_party.identity.public_key]):
            present.add(Category.FIRST_PARTY.value)
        elif isinstance(s, ReviewCertificate):
            present.add(s.certifier.category.value)
    present = sorted(present)
    return {"verdict": _verdict(v), "certifier_categories_present": present}


def _post_release_vuln(w: World) -> dict:
    researcher = w.certifier("security-researcher", Category.THIRD_PARTY, Methodology.ALERTING, Motivation.INDEPENDENT, ["heap-overflow"])
    vulnerable = w.source("service v1", defect="heap-overflow")
    rel = release_l1(w.owner, vulnerable, w.config, w.log, [w.first_party], w.now, version="1.0.0")
    w.clock.advance(DAY)
    found = report_vulnerability(researcher, vulnerable, rel.build.binary_hash, w.log, w.now)
    assert found is not None
    _, alert = found
    w.clock.advance(60)
    policy = w.policy(Level.L1, extra_third=[researcher])
    before = w.audit(rel.build.binary_hash, policy)

    w.clock.advance(DAY)
    patched = w.source("service v1.0.1")
    rel2 = release_l1(w.owner, patched, w.config, w.log, [w.first_party], w.now, version="1.0.1")
    w.clock.advance(DAY)
    issue_followup(researcher, alert.id, rel2.build.binary_hash, "fix verified: bounds check added", w.log, w.now, patched_source_hash=patched.source_hash)
    w.clock.advance(60)
    policy = w.policy(Level.L1, extra_third=[researcher])
    after = w.audit(rel2.build.binary_hash, policy)
    return {"vulnerable_verdict": _verdict(before), "patched_verdict": _verdict(after)}


def _expired_endorsement(w: World) -> dict:
    src = w.source("service v1")
    rel = release_l1(w.owner, src, w.config, w.log, [w.first_party], w.now, validity=7 * DAY, version="1.0.0")
    w.clock.advance(DAY)
    fresh = w.audit(rel.build.binary_hash, w.policy(Level.L1))
    w.clock.advance(7 * DAY)
    expired = w.audit(rel.build.binary_hash, w.policy(Level.L1))
    return {"verdict_while_valid": _verdict(fresh), "verdict_after_expiry": _verdict(expired)}


def _active_crl(w: World) -> dict:
    src = w.source("service v1")
    rel = release_l1(w.owner, src, w.config, w.log, [w.first_party], w.now, version="1.0.0")
    sources = [CrlSource("owner", frozenset({w.owner.identity.public_key}))]
    w.clock.advance(DAY)
    before = w.audit(rel.build.binary_hash, w.policy(Level.L1, crl_sources=sources))
    crl = sign_statement(RevocationList(w.owner.identity, (rel.statement_id,), w.now), w.owner.identity)
    w.log.append(crl.encode())
    w.clock.advance(60)
    after = w.audit(rel.build.binary_hash, w.policy(Level.L1, crl_sources=sources))
    return {"verdict_before_crl": _verdict(before), "verdict_after_crl": _verdict(after)}


def _broken_promise(w: World) -> dict:
    src = w.source("service v1")
    deadline = w.now + 3 * DAY
    rel = release_l1(w.owner, src, w.config, w.log, [w.first_party], w.now, version="1.0.0", to_be_certified_by=deadline)
    w.clock.advance(DAY)
    pending = w.audit(rel.build.binary_hash, w.policy(Level.L2))
    w.clock.now = deadline + 1
    broken = w.audit(rel.build.binary_hash, w.policy(Level.L2))
    return {"verdict_before_deadline": _verdict(pending), "verdict_after_deadline": _verdict(broken)}


def _trusted_builder(w: World) -> dict:
    builders = [TrustedBuilder(w.identity(f"builder-{i}", Role.BUILDER)) for i in range(2)]
    builder_keys = [b.identity.public_key for b in builders]
    src = w.source("service v1")
    # The owner's first-party reviewer approves before handing off to the builders.
    assert w.first_party.review(src).approved
    tr = trusted_build_release(w.owner, src, w.config, builders, w.log, w.now, co_signers=[w.first_party.identity], version="1.0.0")
    provs = [find_by_id(w.log, pid) for pid in tr.provenance_ids]
    signed = sum(
        1 for p in provs if p is not None and isinstance(p[1], ProvenanceStatement) and valid_signers(p[1], builder_keys)
    )
    ref = find_by_id(w.log, tr.endorsement.provenance_ref) if tr.endorsement.provenance_ref else None
    w.clock.advance(DAY)
    # The third-party certifier reviews source and checks linkage; no rebuild.
    cert = certify_from_linkage(
        w.third_party, src, tr.binary_hash, w.log, w.now,
        builder_keys=builder_keys, endorser_keys=[w.owner.identity.public_key],
    )
    w.clock.advance(60)
    v = w.audit(tr.binary_hash, w.policy(Level.L2))
    return {
        "provenance_statements": len(tr.provenance_indices),
        "signed_provenance_statements": signed,
        "provenance_ref_resolves": ref is not None and isinstance(ref[1], ProvenanceStatement),
        "linkage_certificate_logged": cert is not None,
        "verdict": _verdict(v),
    }


def _split_view(w: World) -> dict:
    fork_at = 4
    victims = ("monitor-2", "victim-user")
    w.service = LogService(ServiceConfig(mode=Mode.SPLIT_VIEW, fork_at=fork_at, victim_clients=victims), w.operator, clock=w.clock)
    w.log = LogClient.local(w.service, "owner")
    victim_log = w.log.with_client_id("victim-user")
    monitors = [
        Monitor(w.identity(f"monitor-{i}", Role.MONITOR), w.log.with_client_id(f"monitor-{i}"), w.operator.public_key, w.service.origin, clock=w.clock)
        for i in range(3)
    ]
    connect(monitors)
    good = w.source("service good")
    bad = w.source("service with backdoor")
    for i in range(fork_at):
        release_l1(w.owner, w.source(f"history {i}"), w.config, w.log, [w.first_party], w.now, version=f"0.{i}")
    pre_fork_alarms = gossip_round(monitors)
    # Past the fork point the misbehaving log sends the good release to
    # everyone else and a bad one, under the same version, to the victims.
    release_l1(w.owner, good, w.config, w.log, [w.first_party], w.now, version="1.0.0")
    bad_rel = release_l1(w.owner, bad, w.config, victim_log, [w.first_party], w.now, version="1.0.0")
    w.clock.advance(60)
    monitor_keys = frozenset(m.identity.public_key for m in monitors)
    sources = [CrlSource("monitors", monitor_keys, threshold=2)]
    victim_before = w.audit(bad_rel.build.binary_hash, w.policy(Level.L1, crl_sources=sources), victim_log)

    alarms = gossip_round(monitors)
    split = [a for a in alarms if a.kind is AlarmKind.SPLIT_VIEW]
    crl = collective_revocation(split, monitors, 2, w.now)
    victim_after = w.audit(
        bad_rel.build.binary_hash, w.policy(Level.L1, crl_sources=sources), victim_log, [crl] if crl else []
    )
    return {
        "alarms_before_divergence": len(pre_fork_alarms),
        "split_view_alarm": bool(split),
        "evidence_reverifies": all(verify_alarm(a, w.operator.public_key) for a in split) and bool(split),
        "revocation_signers": 0 if crl is None else len(crl.signatures),
        "revocation_distrusts_log": crl is not None and w.service.origin in crl.distrusted_logs,
        "victim_verdict_before": _verdict(victim_before),
        "victim_verdict_after": _verdict(victim_after),
    }


def _delayed_visibility(w: World) -> dict:
    delay = 2
    w.service = LogService(ServiceConfig(mode=Mode.DELAYED_VISIBILITY, delay_entries=delay, victim_clients=("victim-user", "monitor-1")), w.operator, clock=w.clock)
    w.log = LogClient.local(w.service, "owner")
    victim_log = w.log.with_client_id("victim-user")
    monitors = [
        Monitor(w.identity(f"monitor-{i}", Role.MONITOR), w.log.with_client_id(f"monitor-{i}"), w.operator.public_key, w.service.origin, clock=w.clock)
        for i in range(2)
    ]
    connect(monitors)
    researcher = w.certifier("security-researcher", Category.THIRD_PARTY, Methodology.ALERTING, Motivation.INDEPENDENT, ["use-after-free"])
    src = w.source("service v1", defect="use-after-free")
    rel = release_l1(w.owner, src, w.config, w.log, [w.first_party], w.now, version="1.0.0")
    for i in range(delay):
        release_l1(w.owner, w.source(f"other component {i}"), w.config, w.log, [w.first_party], w.now, version=f"other-{i}")
    w.clock.advance(DAY)
    report_vulnerability(researcher, src, rel.build.binary_hash, w.log, w.now)
    w.clock.advance(60)
    policy = w.policy(Level.L1, extra_third=[researcher])
    alarms = gossip_round(monitors)
    other = w.audit(rel.build.binary_hash, policy)
    victim = w.audit(rel.build.binary_hash, policy, victim_log)
    # Count further entries until the victim sees the alert.
    latency = 0
    while w.audit(rel.build.binary_hash, policy, victim_log).accepted and latency < 10:
        release_l1(w.owner, w.source(f"filler {latency}"), w.config, w.log, [w.first_party], w.now, version=f"filler-{latency}")
        latency += 1
    alarms += gossip_round(monitors)
    lagging = sum(1 for m in monitors for n in m.notices if "ahead of our view" in n)
    return {
        "other_verdict": _verdict(other),
        "victim_verdict_while_delayed": _verdict(victim),
        "alarms": len(alarms),
        "monitor_lag_notices_present": lagging > 0,
        "detection_latency_entries": latency,
    }


# ---------------------------------------------------------------------------
# Registry and runner


def _v(status: str, level: str, *reasons: str) -> dict:
    return {"status": status, "level": level, "reasons": list(reasons)}


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    script: tuple[str, ...]
    expected: dict
    body: Callable[[World], dict] = field(repr=False, compare=False)


SCENARIOS: dict[str, Scenario] = {
    s.name: s
    for s in [
        Scenario(
            "honest-l1",
            "First-party review, owner build, endorsement on the log, client check.",
            ("release_l1 with one first-party reviewer", "auditor decide at L1"),
            {"verdict": _v("accept", "L1"), "inclusion_path_length": 0, "endorsement_signers": 1},
            _honest_l1,
        ),
        Scenario(
            "honest-l2",
            "L1 release followed by an independent rebuild and third-party report.",
            ("release_l1", "third_party_review with rebuild", "auditor decide at L2"),
            {"verdict": _v("accept", "L2"), "certificate_subject_matches": True},
            _honest_l2,
        ),
        Scenario(
            "honest-l3",
            "Open-sourced release certified by third-party and community reviewers.",
            ("release_l1 of open source", "third_party_review", "community review", "auditor decide at L3"),
            {"verdict": _v("accept", "L3"), "certifier_categories_present": ["community", "first_party", "third_party"]},
            _honest_l3,
        ),
        Scenario(
            "post-release-vuln",
            "An alert blocks the vulnerable binary; the patched binary with a follow-up is accepted.",
            ("release_l1 of vulnerable source", "alerting certificate", "decide (reject)", "patched release", "follow-up certificate", "decide patched (accept)"),
            {"vulnerable_verdict": _v("reject", "L1", "unresolved alerting certificate"), "patched_verdict": _v("accept", "L1")},
            _post_release_vuln,
        ),
        Scenario(
            "expired-endorsement",
            "A short-lived endorsement lapses without renewal.",
            ("release_l1 valid for 7 days", "decide after 1 day", "decide after 8 days"),
            {"verdict_while_valid": _v("accept", "L1"), "verdict_after_expiry": _v("reject", "L0", "passively revoked")},
            _expired_endorsement,
        ),
        Scenario(
            "active-crl-revocation",
            "The owner publishes a revocation list naming the endorsement.",
            ("release_l1", "decide (accept)", "owner CRL on the log", "decide (reject)"),
            {"verdict_before_crl": _v("accept", "L1"), "verdict_after_crl": _v("reject", "L0", "actively revoked")},
            _active_crl,
        ),
        Scenario(
            "broken-promise",
            "A promised third-party certificate never arrives.",
            ("release_l1 with to_be_certified_by", "decide at L2 before deadline", "decide at L2 after deadline"),
            {
                "verdict_before_deadline": _v("accept", "L2"),
                "verdict_after_deadline": _v("reject", "L1", "broken certification promise", "insufficient transparency level"),
            },
            _broken_promise,
        ),
        Scenario(
            "trusted-builder-flow",
            "Two trusted builders log signed provenance; the certifier checks linkage instead of rebuilding.",
            ("builders log provenance", "owner endorses with provenance_ref", "certifier checks linkage", "decide at L2"),
            {
                "provenance_statements": 2,
                "signed_provenance_statements": 2,
                "provenance_ref_resolves": True,
                "linkage_certificate_logged": True,
                "verdict": _v("accept", "L2"),
            },
            _trusted_builder,
        ),
        Scenario(
            "split-view-attack",
            "The log forks and feeds a bad release to victims; gossip exposes it and monitors revoke the log.",
            ("shared history", "fork: good release to most, bad release to victims", "gossip round", "collective revocation", "victim decide"),
            {
                "alarms_before_divergence": 0,
                "split_view_alarm": True,
                "evidence_reverifies": True,
                "revocation_signers": 3,
                "revocation_distrusts_log": True,
                "victim_verdict_before": _v("accept", "L1"),
                "victim_verdict_after": _v("reject", "L0", "log distrusted"),
            },
            _split_view,
        ),
        Scenario(
            "delayed-visibility",
            "The log hides its newest entries from victims; an alert reaches them only after the delay.",
            ("release", "alerting certificate", "gossip", "decide as victim and as other", "append until the victim sees the alert"),
            {
                "other_verdict": _v("reject", "L1", "unresolved alerting certificate"),
                "victim_verdict_while_delayed": _v("accept", "L1"),
                "alarms": 0,
                "monitor_lag_notices_present": True,
                "detection_latency_entries": 2,
            },
            _delayed_visibility,
        ),
    ]
}


@dataclass(frozen=True)
class ScenarioResult:
    name: str
    seed: int
    now: int
    expected: dict
    observed: dict
    diff: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.diff

    def to_dict(self) -> dict:
        return {
            "kind": "scenario_report",
            "name": self.name,
            "seed": self.seed,
            "now": self.now,
            "passed": self.passed,
            "expected": self.expected,
            "observed": self.observed,
            "diff": list(self.diff),
        }

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def decode(cls, data: bytes) -> "ScenarioResult":
        d = parse_canonical(data)
        if d.get("kind") != "scenario_report":
            raise ValueError("not a scenario report")
        result = cls(d["name"], d["seed"], d["now"], d["expected"], d["observed"], tuple(d["diff"]))
        if result.passed != d["passed"]:
            raise ValueError("passed flag disagrees with diff")
        return result


def diff_outcomes(expected: Any, observed: Any, path: str = "") -> list[str]:
    """Human-readable differences between nested expected and observed data."""
    if isinstance(expected, dict) and isinstance(observed, dict):
        out = []
        for key in sorted(set(expected) | set(observed)):
            sub = f"{path}.{key}" if path else key
            if key not in observed:
                out.append(f"{sub}: expected {expected[key]!r}, missing")
            elif key not in expected:
                out.append(f"{sub}: unexpected {observed[key]!r}")
            else:
                out.extend(diff_outcomes(expected[key], observed[key], sub))
        return out
    if expected != observed:
        return [f"{path}: expected {expected!r}, observed {observed!r}"]
    return []


def run_scenario(name: str, *, seed: int = DEFAULT_SEED, now: int = DEFAULT_NOW) -> ScenarioResult:
    try:
        scenario = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}") from None
    observed = scenario.body(World(seed, now))
    observed = parse_canonical(canonical_json(observed))  # normalise through the wire encoding
    return ScenarioResult(name, seed, now, scenario.expected, observed, tuple(diff_outcomes(scenario.expected, observed)))


__all__ = ["Clock", "World", "Scenario", "SCENARIOS", "ScenarioResult", "diff_outcomes", "run_scenario", "DEFAULT_NOW", "DEFAULT_SEED"]
