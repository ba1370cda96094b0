"""Command-line entry point: ``cct <command> [flags]``.

Every command prints a short human report to stdout. With ``--out PATH`` it
also writes a canonical-JSON machine report. Exit codes: 0 success or
accept, 1 reject or alarm, 2 inconclusive (log unreachable), 64 usage
error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, NoReturn, Sequence

from .actors import BuildConfig, binary_hash_for
from .auditor import AuditPolicy, EvidenceClaim, Level, decide
from .encoding import EncodingError, b64d, b64e, canonical_json
from .identity import Identity, Role, load_key, save_key
from .kernels import leaf_hash
from .logservice import LogClient, LogRequestError, LogUnavailable, Mode, ServiceConfig, serve
from .merkle_log import verify_checkpoint, verify_consistency, verify_inclusion
from .monitor import AlarmKind, Monitor, collective_revocation, connect, gossip_round
from .scenarios import DEFAULT_NOW, DEFAULT_SEED, SCENARIOS, run_scenario
from .statements import (
    DEFAULT_VALIDITY,
    CertifierProfile,
    CertKind,
    EndorsementStatement,
    FollowUp,
    Methodology,
    Motivation,
    Report,
    ReviewCertificate,
    RevocationList,
    VulnerabilityRecord,
    decode_statement,
    sign_statement,
)

EXIT_OK, EXIT_REJECT, EXIT_INCONCLUSIVE, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers


def _digest_arg(text: str) -> bytes:
    """Accept a 32-byte digest as 64 hex characters or base64."""
    text = text.strip()
    try:
        if len(text) == 64:
            return bytes.fromhex(text)
        raw = b64d(text)
    except (ValueError, EncodingError):
        raise argparse.ArgumentTypeError(f"not a hex or base64 digest: {text!r}") from None
    if len(raw) != 32:
        raise argparse.ArgumentTypeError("digest must be 32 bytes")
    return raw


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


def _key(path: str | None, what: str = "--key-file") -> Identity:
    if path is None:
        raise UsageError(f"{what} is required")
    try:
        return load_key(path)
    except OSError as exc:
        raise UsageError(f"cannot read key file {path}: {exc.strerror}") from exc
    except (EncodingError, ValueError) as exc:
        raise UsageError(f"bad key file {path}: {exc}") from exc


def _client(args: argparse.Namespace) -> LogClient:
    if not args.log_url:
        raise UsageError("--log-url is required")
    return LogClient.http(args.log_url, args.client_id)


def _now(args: argparse.Namespace) -> int:
    return args.now if args.now is not None else int(time.time())


def _policy(args: argparse.Namespace) -> AuditPolicy:
    if not args.policy_file:
        raise UsageError("--policy-file is required")
    try:
        policy = AuditPolicy.decode(_read(args.policy_file))
    except (EncodingError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad policy file {args.policy_file}: {exc}") from exc
    return policy.with_now(args.now) if args.now is not None else policy


def _log_key(args: argparse.Namespace) -> bytes | None:
    if getattr(args, "log_key_file", None):
        return _key(args.log_key_file, "--log-key-file").public_key
    if getattr(args, "policy_file", None):
        return _policy(args).trusted_log_key
    return None


def _emit(args: argparse.Namespace, command: str, lines: Sequence[str], report: dict, code: int) -> int:
    for line in lines:
        print(line)
    if args.out:
        payload = {"kind": "cli_report", "command": command, "exit_code": code, **report}
        Path(args.out).write_bytes(canonical_json(payload))
    return code


def _submit(args: argparse.Namespace, payload: bytes) -> int | None:
    if not args.log_url:
        return None
    return _client(args).append(payload)


# ---------------------------------------------------------------------------
# Commands


def cmd_keygen(args: argparse.Namespace) -> int:
    seed = args.seed.encode() if args.seed is not None else None
    ident = Identity.generate(args.name, Role(args.role), seed)
    save_key(ident, args.key_file)
    lines = [f"wrote {args.role} key for {args.name} to {args.key_file}", f"public key: {b64e(ident.public_key)}"]
    if args.public_out:
        save_key(ident, args.public_out, private=False)
        lines.append(f"wrote public key to {args.public_out}")
    return _emit(args, "keygen", lines, {"identity": ident.public().to_dict()}, EXIT_OK)


def cmd_serve(args: argparse.Namespace) -> int:
    operator = _key(args.key_file)
    try:
        config = ServiceConfig(
            listen=args.listen,
            mode=Mode(args.mode),
            fork_at=args.fork_at,
            victim_clients=frozenset(args.victim or ()),
            delay_entries=args.delay_entries,
            storage_path=args.storage,
            origin=args.origin,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    print(f"serving {config.origin} in {config.mode.value} mode on http://{args.listen}", flush=True)
    try:
        serve(config, operator)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _statement_report(args: argparse.Namespace, command: str, stmt: Any, index: int | None) -> int:
    lines = [f"{stmt.KIND} {b64e(stmt.id)}"]
    if index is not None:
        lines.append(f"logged at index {index}")
    if args.statement_out:
        Path(args.statement_out).write_bytes(stmt.encode())
        lines.append(f"wrote statement to {args.statement_out}")
    report = {"statement": stmt.to_dict(), "statement_id": b64e(stmt.id), "index": index}
    return _emit(args, command, lines, report, EXIT_OK)


def cmd_endorse(args: argparse.Namespace) -> int:
    signers = [_key(p) for p in args.key_file or []]
    if not signers:
        raise UsageError("--key-file is required (repeat for multiple signers)")
    if args.hash is None:
        if not (args.source_file and args.toolchain):
            raise UsageError("give --hash, or --source-file with --toolchain")
        source_hash = hashlib.sha256(_read(args.source_file)).digest()
        args.hash = binary_hash_for(source_hash, BuildConfig(args.toolchain, tuple(args.build_command or ()), tuple(args.build_flag or ())))
    now = _now(args)
    stmt: Any = EndorsementStatement(
        binary_hash=args.hash,
        issued_at=now,
        not_after=now + args.validity,
        claims=args.claims,
        to_be_certified_by=args.to_be_certified_by,
        provenance_ref=args.provenance_ref,
        version=args.version,
        open_sourced=args.open_sourced,
    )
    try:
        for s in signers:
            stmt = sign_statement(stmt, s)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return _statement_report(args, "endorse", stmt, _submit(args, stmt.encode()))


def cmd_certify(args: argparse.Namespace) -> int:
    ident = _key(args.key_file)
    try:
        profile = CertifierProfile(ident, ident.role.value, Methodology(args.methodology), Motivation(args.motivation))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    kind = CertKind(args.cert_kind)
    if kind is CertKind.REPORTING:
        body: Any = Report(args.scope, args.findings, not args.rejected)
    elif kind is CertKind.ALERTING:
        body = VulnerabilityRecord(args.vuln_type or "", args.root_cause or "", args.impact or "", tuple(args.reference or ()))
    else:
        if args.alert_id is None:
            raise UsageError("follow_up certificates need --alert-id")
        body = FollowUp(args.alert_id, args.opinion or "")
    try:
        cert = ReviewCertificate(kind, profile, args.binary_hash, args.source_hash, body, _now(args))
        cert = sign_statement(cert, ident)  # type: ignore[assignment]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return _statement_report(args, "certify", cert, _submit(args, cert.encode()))


def cmd_submit(args: argparse.Namespace) -> int:
    payload = _read(args.file)
    try:
        stmt = decode_statement(payload)
    except EncodingError as exc:
        raise UsageError(f"{args.file} is not a canonical statement: {exc}") from exc
    index = _client(args).append(payload)
    return _statement_report(args, "submit", stmt, index)


def cmd_checkpoint(args: argparse.Namespace) -> int:
    cp = _client(args).checkpoint()
    key = _log_key(args)
    lines = [cp.body().decode().rstrip("\n"), f"signature: {b64e(cp.signature)}"]
    code = EXIT_OK
    verified = None
    if key is not None:
        verified = verify_checkpoint(cp, key)
        lines.append("signature valid" if verified else "SIGNATURE INVALID")
        code = EXIT_OK if verified else EXIT_REJECT
    return _emit(args, "checkpoint", lines, {"checkpoint": cp.to_dict(), "signature_valid": verified}, code)


def cmd_prove(args: argparse.Namespace) -> int:
    client = _client(args)
    key = _log_key(args)
    cp = client.checkpoint()
    if key is not None and not verify_checkpoint(cp, key):
        return _emit(args, "prove", ["checkpoint signature invalid"], {"checkpoint": cp.to_dict(), "verified": False}, EXIT_REJECT)
    if args.index is not None:
        size = args.size if args.size is not None else cp.tree_size
        proof = client.inclusion_proof(args.index, size)
        payload = client.entries(args.index, args.index + 1)[0]
        ok = size == cp.tree_size and verify_inclusion(leaf_hash(payload), proof, cp.root_hash)
        lines = [f"inclusion of leaf {args.index} in tree {size}: {'verified' if ok else 'NOT VERIFIED'}", f"path length {len(proof.audit_path)}"]
        report = {"proof": proof.to_dict(), "checkpoint": cp.to_dict(), "verified": ok}
    elif args.from_size is not None:
        new = args.to_size if args.to_size is not None else cp.tree_size
        proof = client.consistency_proof(args.from_size, new)
        ok = None
        if args.old_root is not None and new == cp.tree_size:
            ok = verify_consistency(args.old_root, cp.root_hash, proof)
        verdict = {True: "verified", False: "NOT VERIFIED", None: "fetched (pass --old-root to verify)"}[ok]
        lines = [f"consistency {args.from_size} -> {new}: {verdict}", f"path length {len(proof.path)}"]
        report = {"proof": proof.to_dict(), "checkpoint": cp.to_dict(), "verified": ok}
    else:
        raise UsageError("give --index (inclusion) or --from (consistency)")
    return _emit(args, "prove", lines, report, EXIT_REJECT if ok is False else EXIT_OK)


def cmd_verify_binary(args: argparse.Namespace) -> int:
    if args.hash is None and args.binary_file is None:
        raise UsageError("give --hash or --binary-file")
    binary_hash = args.hash if args.hash is not None else hashlib.sha256(_read(args.binary_file)).digest()
    policy = _policy(args)
    if args.required_level:
        policy = replace(policy, required_level=Level.parse(args.required_level))
    crls = []
    for path in args.crl_file or []:
        try:
            crl = decode_statement(_read(path))
        except EncodingError as exc:
            raise UsageError(f"{path}: {exc}") from exc
        if not isinstance(crl, RevocationList):
            raise UsageError(f"{path} is not a revocation list")
        crls.append(crl)
    verdict = decide(EvidenceClaim(binary_hash, args.source_tag), _client(args), policy, crls)
    return _emit(args, "verify-binary", [verdict.summary()], {"verdict": verdict.to_dict()}, verdict.exit_code)


def _alarm_lines(alarms: Sequence[Any]) -> list[str]:
    return [f"ALARM {a.kind.value} by {a.raised_by.name}: {a.detail}" for a in alarms]


def cmd_monitor(args: argparse.Namespace) -> int:
    ident = _key(args.key_file)
    log_key = _log_key(args)
    if log_key is None:
        raise UsageError("--log-key-file or --policy-file is required")
    client = _client(args)
    try:
        origin = args.origin or client.checkpoint().origin
        mon = Monitor(ident, client, log_key, origin, clock=lambda: _now(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    alarms = []
    for i in range(args.rounds):
        alarms += mon.poll()
        if i + 1 < args.rounds:
            time.sleep(args.interval)
    lines = _alarm_lines(alarms) + mon.notices + [f"verified size {mon.verified_size}, {len(alarms)} alarm(s)"]
    report = {"alarms": [a.to_dict() for a in alarms], "verified_size": mon.verified_size, "notices": mon.notices}
    return _emit(args, "monitor", lines, report, EXIT_REJECT if alarms else EXIT_OK)


def cmd_gossip(args: argparse.Namespace) -> int:
    log_key = _log_key(args)
    if log_key is None:
        raise UsageError("--log-key-file or --policy-file is required")
    client = _client(args)
    specs = args.monitor or ["monitor-0", "monitor-1"]
    if len(specs) < 2:
        raise UsageError("gossip needs at least two --monitor entries")
    seed = str(args.seed).encode()
    origin = args.origin or client.checkpoint().origin
    monitors = []
    for spec in specs:
        name, _, cid = spec.partition("=")
        ident = Identity.generate(name, Role.MONITOR, seed)
        monitors.append(Monitor(ident, client.with_client_id(cid or name), log_key, origin, clock=lambda: _now(args)))
    connect(monitors)
    alarms = []
    for _ in range(args.rounds):
        alarms += gossip_round(monitors)
    forks = [a for a in alarms if a.kind in (AlarmKind.SPLIT_VIEW, AlarmKind.APPEND_ONLY_VIOLATION)]
    crl = collective_revocation(forks, monitors, args.threshold, _now(args)) if forks else None
    lines = _alarm_lines(alarms) + [f"{len(alarms)} alarm(s) over {args.rounds} round(s)"]
    if crl is not None:
        lines.append(f"collective revocation signed by {len(crl.signatures)} monitor(s): distrusts {', '.join(crl.distrusted_logs)}")
        if args.crl_out:
            Path(args.crl_out).write_bytes(crl.encode())
    report = {"alarms": [a.to_dict() for a in alarms], "revocation": None if crl is None else crl.to_dict()}
    return _emit(args, "gossip", lines, report, EXIT_REJECT if alarms else EXIT_OK)


def cmd_scenario(args: argparse.Namespace) -> int:
    if args.action == "list":
        lines = [f"{s.name:24} {s.description}" for s in SCENARIOS.values()]
        return _emit(args, "scenario list", lines, {"scenarios": list(SCENARIOS)}, EXIT_OK)
    if not args.name:
        raise UsageError("scenario run needs a name; see `cct scenario list`")
    if args.name not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.name!r}; known: {', '.join(SCENARIOS)}")
    result = run_scenario(args.name, seed=args.seed, now=args.now if args.now is not None else DEFAULT_NOW)
    lines = [f"scenario {result.name}: {'PASS' if result.passed else 'FAIL'}"]
    for key, value in result.observed.items():
        lines.append(f"  {key}: {canonical_json(value).decode()}")
    lines += [f"  DIFF {d}" for d in result.diff]
    if args.out:
        Path(args.out).write_bytes(result.encode())
        args = argparse.Namespace(**{**vars(args), "out": None})
    return _emit(args, "scenario", lines, {}, EXIT_OK if result.passed else EXIT_REJECT)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-url", help="base URL of the log service")
    common.add_argument("--client-id", help="value for the X-Client-Id header")
    common.add_argument("--now", type=int, help="Unix seconds to use instead of the wall clock")
    common.add_argument("--out", help="write a canonical JSON machine report here")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cct", description="Transparency toolkit for confidential-computing binaries.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("keygen", parents=[common], help="generate an Ed25519 identity")
    s.add_argument("--name", required=True)
    s.add_argument("--role", required=True, choices=[r.value for r in Role])
    s.add_argument("--key-file", required=True, help="where to write the private key")
    s.add_argument("--public-out", help="also write the public key here")
    s.add_argument("--seed", help="derive the key deterministically (tests only)")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("serve", parents=[common], help="run the log service")
    s.add_argument("--key-file", required=True, help="log operator private key")
    s.add_argument("--listen", default="127.0.0.1:8080")
    s.add_argument("--mode", default=Mode.HONEST.value, choices=[m.value for m in Mode])
    s.add_argument("--fork-at", type=int)
    s.add_argument("--victim", action="append", help="client id routed to the adversarial view (repeatable)")
    s.add_argument("--delay-entries", type=int, default=0)
    s.add_argument("--storage", help="record file for persistence")
    s.add_argument("--origin", default=ServiceConfig.origin)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("endorse", parents=[common], help="sign an endorsement and optionally log it")
    s.add_argument("--key-file", action="append", help="signer private key (repeatable)")
    s.add_argument("--hash", type=_digest_arg, help="binary hash (hex or base64)")
    s.add_argument("--source-file", help="compute the hash by simulated build of this source")
    s.add_argument("--toolchain")
    s.add_argument("--build-command", action="append")
    s.add_argument("--build-flag", action="append")
    s.add_argument("--validity", type=int, default=DEFAULT_VALIDITY, help="seconds")
    s.add_argument("--version")
    s.add_argument("--claims", default="approved for production use")
    s.add_argument("--to-be-certified-by", type=int)
    s.add_argument("--provenance-ref", type=_digest_arg)
    s.add_argument("--open-sourced", action="store_true")
    s.add_argument("--statement-out")
    s.set_defaults(func=cmd_endorse)

    s = sub.add_parser("certify", parents=[common], help="sign a review certificate and optionally log it")
    s.add_argument("--key-file", required=True)
    s.add_argument("--methodology", required=True, choices=[m.value for m in Methodology])
    s.add_argument("--motivation", required=True, choices=[m.value for m in Motivation])
    s.add_argument("--cert-kind", required=True, choices=[k.value for k in CertKind])
    s.add_argument("--binary-hash", required=True, type=_digest_arg)
    s.add_argument("--source-hash", required=True, type=_digest_arg)
    s.add_argument("--scope", default="")
    s.add_argument("--findings", default="")
    s.add_argument("--rejected", action="store_true", help="reporting certificate that does not approve")
    s.add_argument("--vuln-type")
    s.add_argument("--root-cause")
    s.add_argument("--impact")
    s.add_argument("--reference", action="append")
    s.add_argument("--alert-id", type=_digest_arg)
    s.add_argument("--opinion")
    s.add_argument("--statement-out")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("submit", parents=[common], help="append a canonical statement file to the log")
    s.add_argument("file")
    s.add_argument("--statement-out")
    s.set_defaults(func=cmd_submit)

    s = sub.add_parser("checkpoint", parents=[common], help="fetch (and verify) the latest checkpoint")
    s.add_argument("--log-key-file")
    s.add_argument("--policy-file")
    s.set_defaults(func=cmd_checkpoint)

    s = sub.add_parser("prove", parents=[common], help="fetch and verify an inclusion or consistency proof")
    s.add_argument("--index", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--from", dest="from_size", type=int)
    s.add_argument("--to", dest="to_size", type=int)
    s.add_argument("--old-root", type=_digest_arg)
    s.add_argument("--log-key-file")
    s.add_argument("--policy-file")
    s.set_defaults(func=cmd_prove)

    s = sub.add_parser("verify-binary", parents=[common], help="audit a binary hash against the log")
    s.add_argument("--hash", type=_digest_arg)
    s.add_argument("--binary-file")
    s.add_argument("--source-tag", default="local-binary", choices=["local-binary", "remote-attestation"])
    s.add_argument("--policy-file")
    s.add_argument("--required-level", choices=[lv.name for lv in Level])
    s.add_argument("--crl-file", action="append", help="revocation list obtained outside the log (repeatable)")
    s.set_defaults(func=cmd_verify_binary)

    s = sub.add_parser("monitor", parents=[common], help="poll the log and check it")
    s.add_argument("--key-file", required=True, help="monitor private key")
    s.add_argument("--log-key-file")
    s.add_argument("--policy-file")
    s.add_argument("--origin")
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--interval", type=float, default=5.0)
    s.set_defaults(func=cmd_monitor)

    s = sub.add_parser("gossip", parents=[common], help="run monitors in a full-mesh gossip against the log")
    s.add_argument("--monitor", action="append", help="NAME or NAME=CLIENT_ID (repeatable)")
    s.add_argument("--log-key-file")
    s.add_argument("--policy-file")
    s.add_argument("--origin")
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--threshold", type=int, default=2)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--crl-out")
    s.set_defaults(func=cmd_gossip)

    s = sub.add_parser("scenario", parents=[common], help="run a built-in end-to-end scenario")
    s.add_argument("action", choices=["run", "list"])
    s.add_argument("name", nargs="?")
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.set_defaults(func=cmd_scenario)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except UsageError as exc:
        print(f"cct {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LogUnavailable, LogRequestError) as exc:
        print(f"cct {args.command}: log error: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
