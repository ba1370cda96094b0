"""Append-only Merkle transparency log.

Tree hashing follows the usual transparency-log construction: leaves are
``SHA-256(0x00 || payload)``, interior nodes ``SHA-256(0x01 || left || right)``,
and a subtree of ``n`` leaves splits at the largest power of two strictly
below ``n``. The empty tree hashes to ``SHA-256("")``.

Storage is a single file of ``uint32_be(len) || payload`` records. The
latest signed checkpoint lives next to it in ``<path>.checkpoint``.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import kernels
from .encoding import (
    DIGEST_SIZE,
    EncodingError,
    b64d,
    b64e,
    canonical_json,
    digest_from_b64,
    parse_json,
    sha256,
)
from .identity import Identity, verify_signature

log = logging.getLogger(__name__)

EMPTY_ROOT = sha256(b"")
RECORD_HEADER = 4
MAX_RECORD = 2**32 - 1
CHECKPOINT_SUFFIX = ".checkpoint"


class LogError(Exception):
    """Base class for log failures."""


class OutOfRange(LogError, ValueError):
    pass


class StorageError(LogError):
    pass


class LogCorruptionError(LogError):
    def __init__(self, offset: int, reason: str) -> None:
        super().__init__(f"log corrupted at byte offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


# ---------------------------------------------------------------------------
# Tree over leaf hashes


def _largest_pow2_below(n: int) -> int:
    """Largest power of two strictly less than ``n`` (``n >= 2``)."""
    return 1 << ((n - 1).bit_length() - 1)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


class MerkleTree:
    """Merkle tree over an append-only sequence of leaf hashes.

    Perfect subtree roots are cached per level, so roots and proofs for
    any prefix size cost O(log n) hashes.
    """

    def __init__(self, leaf_hashes: Sequence[bytes] = ()) -> None:
        self._levels: list[list[bytes]] = [[]]
        if leaf_hashes:
            self.extend(leaf_hashes)

    def __len__(self) -> int:
        return len(self._levels[0])

    @property
    def size(self) -> int:
        return len(self._levels[0])

    def extend(self, leaf_hashes: Sequence[bytes]) -> None:
        kernels.extend_levels(self._levels, leaf_hashes)

    def append(self, leaf_hash: bytes) -> None:
        kernels.extend_levels(self._levels, (leaf_hash,))

    def copy(self) -> "MerkleTree":
        clone = MerkleTree()
        clone._levels = [list(level) for level in self._levels]
        return clone

    def leaf_hash(self, index: int) -> bytes:
        return self._levels[0][index]

    def leaf_hashes(self, start: int = 0, end: int | None = None) -> list[bytes]:
        return self._levels[0][start:end]

    def _range(self, start: int, end: int) -> bytes:
        width = end - start
        if _is_pow2(width) and start % width == 0:
            level = width.bit_length() - 1
            return self._levels[level][start >> level]
        if width == 1:  # pragma: no cover - covered by the pow2 branch
            return self._levels[0][start]
        k = _largest_pow2_below(width)
        if start % k:
            # Never produced by the recursions below; kept for generality.
            return kernels.range_root(self._levels[0], start, end)
        return kernels.node_hash(self._range(start, start + k), self._range(start + k, end))

    def root(self, size: int | None = None) -> bytes:
        n = self.size if size is None else size
        if not 0 <= n <= self.size:
            raise OutOfRange(f"tree size {n} exceeds log size {self.size}")
        if n == 0:
            return EMPTY_ROOT
        return self._range(0, n)

    def inclusion_path(self, index: int, size: int) -> list[bytes]:
        if not 0 <= index < size <= self.size:
            raise OutOfRange(f"no inclusion proof for leaf {index} in tree of size {size} (log size {self.size})")
        path: list[bytes] = []
        start, end, m = 0, size, index
        while end - start > 1:
            k = _largest_pow2_below(end - start)
            if m < k:
                path.append(self._range(start + k, end))
                end = start + k
            else:
                path.append(self._range(start, start + k))
                start += k
                m -= k
        path.reverse()
        return path

    def consistency_path(self, old_size: int, new_size: int) -> list[bytes]:
        if not 0 < old_size <= new_size <= self.size:
            raise OutOfRange(
                f"no consistency proof from {old_size} to {new_size} (log size {self.size})"
            )
        path: list[bytes] = []
        start, end, m, complete = 0, new_size, old_size, True
        while True:
            n = end - start
            if m == n:
                if not complete:
                    path.append(self._range(start, end))
                break
            k = _largest_pow2_below(n)
            if m <= k:
                path.append(self._range(start + k, end))
                end = start + k
            else:
                path.append(self._range(start, start + k))
                start += k
                m -= k
                complete = False
        path.reverse()
        return path


# ---------------------------------------------------------------------------
# Proofs


@dataclass(frozen=True)
class InclusionProof:
    leaf_index: int
    tree_size: int
    audit_path: tuple[bytes, ...]

    def to_dict(self) -> dict:
        return {
            "leaf_index": self.leaf_index,
            "tree_size": self.tree_size,
            "audit_path": [b64e(h) for h in self.audit_path],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InclusionProof":
        try:
            return cls(
                _nonneg_int(d["leaf_index"], "leaf_index"),
                _nonneg_int(d["tree_size"], "tree_size"),
                tuple(digest_from_b64(h, "audit path entry") for h in d["audit_path"]),
            )
        except (KeyError, TypeError) as exc:
            raise EncodingError(f"malformed inclusion proof: {exc}") from exc


@dataclass(frozen=True)
class ConsistencyProof:
    old_size: int
    new_size: int
    path: tuple[bytes, ...]

    def to_dict(self) -> dict:
        return {
            "old_size": self.old_size,
            "new_size": self.new_size,
            "path": [b64e(h) for h in self.path],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyProof":
        try:
            return cls(
                _nonneg_int(d["old_size"], "old_size"),
                _nonneg_int(d["new_size"], "new_size"),
                tuple(digest_from_b64(h, "consistency path entry") for h in d["path"]),
            )
        except (KeyError, TypeError) as exc:
            raise EncodingError(f"malformed consistency proof: {exc}") from exc


def _nonneg_int(value: object, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise EncodingError(f"{what} must be a non-negative integer")
    return value


def root_from_inclusion(leaf_hash: bytes, proof: InclusionProof) -> bytes | None:
    """Recompute the root implied by ``proof``; ``None`` if structurally invalid."""
    index, size = proof.leaf_index, proof.tree_size
    if not 0 <= index < size:
        return None
    fn, sn, r = index, size - 1, leaf_hash
    for p in proof.audit_path:
        if sn == 0:
            return None
        if fn & 1 or fn == sn:
            r = kernels.node_hash(p, r)
            while not fn & 1 and fn:
                fn >>= 1
                sn >>= 1
        else:
            r = kernels.node_hash(r, p)
        fn >>= 1
        sn >>= 1
    if sn != 0:
        return None
    return r


def verify_inclusion(leaf_hash: bytes, proof: InclusionProof, expected_root: bytes) -> bool:
    if len(leaf_hash) != DIGEST_SIZE or any(len(p) != DIGEST_SIZE for p in proof.audit_path):
        return False
    return root_from_inclusion(leaf_hash, proof) == expected_root


def verify_consistency(old_root: bytes, new_root: bytes, proof: ConsistencyProof) -> bool:
    old, new, path = proof.old_size, proof.new_size, list(proof.path)
    if not 0 < old <= new or any(len(p) != DIGEST_SIZE for p in path):
        return False
    if old == new:
        return not path and old_root == new_root
    if _is_pow2(old):
        path.insert(0, old_root)
    if not path:
        return False
    fn, sn = old - 1, new - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    fr = sr = path[0]
    for c in path[1:]:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            fr = kernels.node_hash(c, fr)
            sr = kernels.node_hash(c, sr)
            while not fn & 1 and fn:
                fn >>= 1
                sn >>= 1
        else:
            sr = kernels.node_hash(sr, c)
        fn >>= 1
        sn >>= 1
    return sn == 0 and fr == old_root and sr == new_root


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass(frozen=True)
class Checkpoint:
    origin: str
    tree_size: int
    root_hash: bytes
    timestamp: int
    signature: bytes = b""

    def body(self) -> bytes:
        """The exact bytes the log operator signs."""
        return f"{self.origin}\n{self.tree_size}\n{b64e(self.root_hash)}\n{self.timestamp}\n".encode("utf-8")

    def well_formed(self) -> bool:
        return (
            isinstance(self.origin, str)
            and bool(self.origin)
            and "\n" not in self.origin
            and isinstance(self.tree_size, int)
            and not isinstance(self.tree_size, bool)
            and self.tree_size >= 0
            and isinstance(self.root_hash, bytes)
            and len(self.root_hash) == DIGEST_SIZE
            and isinstance(self.timestamp, int)
            and not isinstance(self.timestamp, bool)
            and self.timestamp >= 0
        )

    def same_state(self, other: "Checkpoint") -> bool:
        """Equal commitments; timestamps and signatures are ignored."""
        return (self.origin, self.tree_size, self.root_hash) == (other.origin, other.tree_size, other.root_hash)

    def to_dict(self) -> dict:
        return {
            "origin": self.origin,
            "tree_size": self.tree_size,
            "root_hash": b64e(self.root_hash),
            "timestamp": self.timestamp,
            "signature": b64e(self.signature),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        try:
            origin = d["origin"]
            if not isinstance(origin, str):
                raise EncodingError("origin must be a string")
            return cls(
                origin,
                _nonneg_int(d["tree_size"], "tree_size"),
                digest_from_b64(d["root_hash"], "root_hash"),
                _nonneg_int(d["timestamp"], "timestamp"),
                b64d(d["signature"]),
            )
        except (KeyError, TypeError) as exc:
            raise EncodingError(f"malformed checkpoint: {exc}") from exc

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())


def sign_checkpoint_body(origin: str, tree_size: int, root_hash: bytes, timestamp: int, key: Identity) -> Checkpoint:
    unsigned = Checkpoint(origin, tree_size, root_hash, timestamp)
    if not unsigned.well_formed():
        raise ValueError(f"malformed checkpoint fields: {unsigned!r}")
    return Checkpoint(origin, tree_size, root_hash, timestamp, key.sign(unsigned.body()))


def verify_checkpoint(cp: Checkpoint, log_public_key: bytes) -> bool:
    return cp.well_formed() and verify_signature(log_public_key, cp.body(), cp.signature)


# ---------------------------------------------------------------------------
# The log


@dataclass(frozen=True)
class LogLeaf:
    index: int
    payload: bytes
    leaf_hash: bytes


@dataclass
class LoadReport:
    records: int = 0
    truncated_at: Optional[int] = None
    truncated_bytes: int = 0
    checkpoint_size: Optional[int] = None
    notes: list[str] = field(default_factory=list)


class MerkleLog:
    """Append-only log with durable storage and per-append checkpoints.

    Single writer, many readers: ``append`` is serialized; proofs and roots
    against a fixed ``tree_size`` may be computed concurrently.
    """

    def __init__(
        self,
        origin: str,
        operator: Identity | None = None,
        path: str | os.PathLike | None = None,
        *,
        clock: Callable[[], int] | None = None,
        fsync: bool = True,
    ) -> None:
        if not origin or "\n" in origin:
            raise ValueError("origin must be a non-empty single line")
        self.origin = origin
        self.operator = operator
        self.clock = clock or (lambda: int(time.time()))
        self.fsync = fsync
        self._tree = MerkleTree()
        self._payloads: list[bytes] = []
        self._lock = threading.Lock()
        self._checkpoint: Checkpoint | None = None
        self.path: Path | None = None
        self.load_report: LoadReport | None = None
        if path is not None:
            self._attach(Path(path))

    # -- storage ----------------------------------------------------------

    def _attach(self, path: Path) -> None:
        if path.exists() and path.stat().st_size:
            raise StorageError(f"{path} already holds records; open it with MerkleLog.load")
        self.path = path
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.touch()
            self._fsync_dir(path)

    def _fsync_dir(self, path: Path) -> None:
        if not self.fsync:
            return
        fd = os.open(path.parent, os.O_RDONLY)
        try:
            os.fsync(fd)
        finally:
            os.close(fd)

    def _write_record(self, payload: bytes) -> None:
        assert self.path is not None
        with open(self.path, "ab") as fh:
            start = fh.tell()
            try:
                fh.write(len(payload).to_bytes(RECORD_HEADER, "big") + payload)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            except OSError as exc:
                try:
                    fh.truncate(start)
                except OSError:
                    pass
                raise StorageError(f"append failed: {exc}") from exc

    def _checkpoint_path(self) -> Path:
        assert self.path is not None
        return self.path.with_name(self.path.name + CHECKPOINT_SUFFIX)

    def _store_checkpoint(self, cp: Checkpoint) -> None:
        if self.path is None:
            return
        target = self._checkpoint_path()
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(cp.encode())
        os.replace(tmp, target)

    # -- writes -----------------------------------------------------------

    def append(self, payload: bytes) -> int:
        if not isinstance(payload, (bytes, bytearray)):
            raise TypeError("payload must be bytes")
        payload = bytes(payload)
        if not payload:
            raise ValueError("payload must be non-empty")
        if len(payload) > MAX_RECORD:
            raise ValueError("payload too large")
        with self._lock:
            index = len(self._payloads)
            if self.path is not None:
                self._write_record(payload)
            self._payloads.append(payload)
            self._tree.append(kernels.leaf_hash(payload))
            if self.operator is not None and self.operator.can_sign:
                self._checkpoint = self._sign(index + 1)
                self._store_checkpoint(self._checkpoint)
            return index

    # -- reads ------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._payloads)

    def __len__(self) -> int:
        return self.size

    @property
    def tree(self) -> MerkleTree:
        return self._tree

    def entry(self, index: int) -> bytes:
        if not 0 <= index < self.size:
            raise OutOfRange(f"no entry {index} (log size {self.size})")
        return self._payloads[index]

    def leaf(self, index: int) -> LogLeaf:
        return LogLeaf(index, self.entry(index), self._tree.leaf_hash(index))

    def entries(self, start: int, end: int) -> list[bytes]:
        if not 0 <= start <= end <= self.size:
            raise OutOfRange(f"bad entry range [{start}, {end}) for log size {self.size}")
        return self._payloads[start:end]

    def root(self, tree_size: int | None = None) -> bytes:
        return self._tree.root(self.size if tree_size is None else tree_size)

    def prove_inclusion(self, leaf_index: int, tree_size: int) -> InclusionProof:
        return InclusionProof(leaf_index, tree_size, tuple(self._tree.inclusion_path(leaf_index, tree_size)))

    def prove_consistency(self, old_size: int, new_size: int) -> ConsistencyProof:
        return ConsistencyProof(old_size, new_size, tuple(self._tree.consistency_path(old_size, new_size)))

    def copy(self) -> "MerkleLog":
        """In-memory copy sharing no mutable state with this log."""
        other = MerkleLog(self.origin, self.operator, clock=self.clock, fsync=self.fsync)
        with self._lock:
            other._payloads = list(self._payloads)
            other._tree.extend(self._tree.leaf_hashes())
        return other

    # -- checkpoints ------------------------------------------------------

    def _sign(self, tree_size: int) -> Checkpoint:
        if self.operator is None or not self.operator.can_sign:
            raise PermissionError("log has no operator signing key")
        return sign_checkpoint_body(self.origin, tree_size, self._tree.root(tree_size), int(self.clock()), self.operator)

    def sign_checkpoint(self, tree_size: int | None = None) -> Checkpoint:
        n = self.size if tree_size is None else tree_size
        if not 0 <= n <= self.size:
            raise OutOfRange(f"tree size {n} exceeds log size {self.size}")
        cp = self._sign(n)
        if n == self.size:
            with self._lock:
                if n == self.size:
                    self._checkpoint = cp
                    self._store_checkpoint(cp)
        return cp

    def latest_checkpoint(self) -> Checkpoint:
        cp = self._checkpoint
        if cp is None or cp.tree_size != self.size:
            cp = self.sign_checkpoint()
        return cp

    # -- persistence ------------------------------------------------------

    def persist(self, path: str | os.PathLike | None = None) -> Path:
        """Write the whole log to ``path`` (or flush the attached file)."""
        if path is None:
            if self.path is None:
                raise StorageError("no storage path attached")
            return self.path
        target = Path(path)
        tmp = target.with_name(target.name + ".tmp")
        with self._lock:
            with open(tmp, "wb") as fh:
                for payload in self._payloads:
                    fh.write(len(payload).to_bytes(RECORD_HEADER, "big") + payload)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            os.replace(tmp, target)
            cp = self._checkpoint
            if cp is not None and cp.tree_size == self.size:
                ctmp = target.with_name(target.name + CHECKPOINT_SUFFIX + ".tmp")
                ctmp.write_bytes(cp.encode())
                os.replace(ctmp, target.with_name(target.name + CHECKPOINT_SUFFIX))
        return target

    @classmethod
    def load(
        cls,
        path: str | os.PathLike,
        origin: str | None = None,
        operator: Identity | None = None,
        *,
        strict: bool = False,
        clock: Callable[[], int] | None = None,
        fsync: bool = True,
    ) -> "MerkleLog":
        """Open a stored log.

        A partial trailing record (an interrupted append) is cut off and
        noted in ``load_report``; with ``strict=True`` it raises instead.
        Zero-length records, or records disagreeing with the stored
        checkpoint, raise :class:`LogCorruptionError`.
        """
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(p)
        data = p.read_bytes()
        report = LoadReport()
        payloads: list[bytes] = []
        offset = 0
        while offset < len(data):
            if offset + RECORD_HEADER > len(data):
                break
            length = int.from_bytes(data[offset:offset + RECORD_HEADER], "big")
            if length == 0:
                raise LogCorruptionError(offset, "zero-length record")
            end = offset + RECORD_HEADER + length
            if end > len(data):
                break
            payloads.append(data[offset + RECORD_HEADER:end])
            offset = end
        if offset < len(data):
            if strict:
                raise LogCorruptionError(offset, f"truncated record ({len(data) - offset} trailing bytes)")
            report.truncated_at = offset
            report.truncated_bytes = len(data) - offset
            report.notes.append(f"dropped partial record at byte offset {offset}")
            log.warning("%s: dropping %d-byte partial record at offset %d", p, len(data) - offset, offset)
            with open(p, "r+b") as fh:
                fh.truncate(offset)

        cp = None
        cp_path = p.with_name(p.name + CHECKPOINT_SUFFIX)
        if cp_path.exists():
            try:
                cp = Checkpoint.from_dict(parse_json(cp_path.read_bytes()))
            except EncodingError as exc:
                raise LogCorruptionError(0, f"unreadable checkpoint file: {exc}") from exc
        if origin is None:
            if cp is None:
                raise ValueError("origin required when no checkpoint is stored")
            origin = cp.origin

        inst = cls(origin, operator, clock=clock, fsync=fsync)
        inst._payloads = payloads
        inst._tree.extend(kernels.hash_leaves(payloads))
        inst.path = p
        report.records = len(payloads)

        if cp is not None:
            report.checkpoint_size = cp.tree_size
            if cp.origin != origin:
                raise LogCorruptionError(0, f"checkpoint origin {cp.origin!r} != {origin!r}")
            if operator is not None and not verify_checkpoint(cp, operator.public_key):
                raise LogCorruptionError(0, "stored checkpoint signature invalid")
            if cp.tree_size > len(payloads):
                raise LogCorruptionError(offset, f"checkpoint commits to {cp.tree_size} records, found {len(payloads)}")
            if inst._tree.root(cp.tree_size) != cp.root_hash:
                raise LogCorruptionError(
                    _record_offset(payloads, cp.tree_size),
                    f"first {cp.tree_size} records do not match the stored checkpoint root",
                )
            if cp.tree_size == len(payloads):
                inst._checkpoint = cp
        inst.load_report = report
        return inst


def _record_offset(payloads: list[bytes], count: int) -> int:
    return sum(RECORD_HEADER + len(p) for p in payloads[:count])
