from __future__ import annotations

import itertools
import math
import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

import oracle
from cctransparency.identity import Identity, Role
from cctransparency.merkle_log import (
    EMPTY_ROOT,
    Checkpoint,
    ConsistencyProof,
    InclusionProof,
    LogCorruptionError,
    MerkleLog,
    MerkleTree,
    OutOfRange,
    StorageError,
    root_from_inclusion,
    sign_checkpoint_body,
    verify_checkpoint,
    verify_consistency,
    verify_inclusion,
)
from cctransparency.kernels import leaf_hash

# Public certificate-transparency reference leaves; roots, the leaf-0 audit
# path and the 6 -> 8 consistency path cross-checked against tests/oracle.py.
CT_LEAVES = [b"", b"\x00", b"\x10", b"\x20\x21", b"\x30\x31", b"\x40\x41\x42\x43", bytes(range(0x50, 0x58)), bytes(range(0x60, 0x70))]
CT_ROOTS = [
    "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d",
    "fac54203e7cc696cf0dfcb42c92a1d9dbaf70ad9e621f4bd8d98662f00e3c125",
    "aeb6bcfe274b70a14fb067a5e5578264db0fa9b51af5e0ba159158f329e06e77",
    "d37ee418976dd95753c1c73862b9398fa2a2cf9b4ff0fdfe8b30cd95209614b7",
    "4e3bbb1f7b478dcfe71fb631631519a3bca12c9aefca1612bfce4c13a86264d4",
    "76e67dadbcdf1e10e1b74ddc608abd2f98dfb16fbce75277b5232a127f2087ef",
    "ddb89be403809e325750d3d263cd78929c2942b7942a34b77e122c9594a74c8c",
    "5dc9da79a70659a9ad559cb701ded9a2ab9d823aad2f4960cfe370eff4604328",
]
CT_PATH_LEAF0_SIZE8 = [
    "96a296d224f285c67bee93c30f8a309157f0daa35dc5b87e410b78630a09cfc7",
    "5f083f0a1a33ca076a95279832580db3e0ef4584bdff1f54c8a360f50de3031e",
    "6b47aaf29ee3c2af9af889bc1fb9254dabd31177f16232dd6aab035ca39bf6e4",
]
CT_CONSISTENCY_6_8 = [
    "0ebc5d3437fbe2db158b9f126a1d118e308181031d0a949f8dededebc558ef6a",
    "ca854ea128ed050b41b35ffc1b87b8eb2bde461e9e3b5596ece6b9d5975a0ae0",
    "d37ee418976dd95753c1c73862b9398fa2a2cf9b4ff0fdfe8b30cd95209614b7",
]

OPERATOR = Identity.generate("operator", Role.LOG_OPERATOR, b"merkle-tests")


def tree_of(payloads):
    return MerkleTree([leaf_hash(p) for p in payloads])


# -- frozen vectors -----------------------------------------------------------


def test_empty_root_is_hash_of_empty_string():
    assert EMPTY_ROOT.hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert MerkleTree().root() == EMPTY_ROOT


def test_reference_roots():
    t = tree_of(CT_LEAVES)
    assert [t.root(n).hex() for n in range(1, 9)] == CT_ROOTS


def test_reference_inclusion_and_consistency_paths():
    t = tree_of(CT_LEAVES)
    assert [h.hex() for h in t.inclusion_path(0, 8)] == CT_PATH_LEAF0_SIZE8
    assert [h.hex() for h in t.consistency_path(6, 8)] == CT_CONSISTENCY_6_8
    proof = ConsistencyProof(6, 8, tuple(bytes.fromhex(h) for h in CT_CONSISTENCY_6_8))
    assert verify_consistency(bytes.fromhex(CT_ROOTS[5]), bytes.fromhex(CT_ROOTS[7]), proof)


# -- oracle equivalence -------------------------------------------------------

payloads_st = st.lists(st.binary(max_size=24), min_size=0, max_size=80)


@settings(max_examples=80, deadline=None)
@given(payloads=payloads_st)
def test_roots_and_proofs_match_oracle(payloads):
    t = tree_of(payloads)
    n = len(payloads)
    assert t.root() == oracle.mth(payloads)
    for size in range(1, n + 1):
        assert t.root(size) == oracle.mth(payloads[:size])
    for m in range(n):
        assert t.inclusion_path(m, n) == oracle.path(m, payloads)
    for old in range(1, n + 1):
        assert t.consistency_path(old, n) == oracle.consistency(old, payloads)


@settings(max_examples=60, deadline=None)
@given(payloads=st.lists(st.binary(max_size=16), min_size=1, max_size=64), data=st.data())
def test_generated_proofs_verify(payloads, data):
    t = tree_of(payloads)
    n = len(payloads)
    size = data.draw(st.integers(1, n))
    index = data.draw(st.integers(0, size - 1))
    proof = InclusionProof(index, size, tuple(t.inclusion_path(index, size)))
    assert verify_inclusion(leaf_hash(payloads[index]), proof, t.root(size))
    assert len(proof.audit_path) <= math.ceil(math.log2(size)) if size > 1 else len(proof.audit_path) == 0
    old = data.draw(st.integers(1, size))
    cproof = ConsistencyProof(old, size, tuple(t.consistency_path(old, size)))
    assert verify_consistency(t.root(old), t.root(size), cproof)


@settings(max_examples=40, deadline=None)
@given(payloads=st.lists(st.binary(max_size=8), min_size=2, max_size=40), data=st.data())
def test_inclusion_rejects_wrong_leaf_index_or_root(payloads, data):
    t = tree_of(payloads)
    n = len(payloads)
    i = data.draw(st.integers(0, n - 1))
    proof = InclusionProof(i, n, tuple(t.inclusion_path(i, n)))
    other = data.draw(st.integers(0, n - 1).filter(lambda j: payloads[j] != payloads[i]) if len(set(payloads)) > 1 else st.just(None))
    if other is not None:
        assert not verify_inclusion(leaf_hash(payloads[other]), proof, t.root())
    assert not verify_inclusion(leaf_hash(payloads[i]), proof, oracle.h(b"not the root"))
    if n > 1:
        moved = InclusionProof((i + 1) % n, n, proof.audit_path)
        # Moving the index only verifies if both positions hold the same leaf hash path.
        if verify_inclusion(leaf_hash(payloads[i]), moved, t.root()):
            assert payloads[(i + 1) % n] == payloads[i]


def test_inclusion_rejects_malformed_proofs():
    t = tree_of(CT_LEAVES)
    good = InclusionProof(3, 8, tuple(t.inclusion_path(3, 8)))
    lh = leaf_hash(CT_LEAVES[3])
    assert verify_inclusion(lh, good, t.root())
    assert not verify_inclusion(lh, InclusionProof(3, 8, good.audit_path[:-1]), t.root())
    assert not verify_inclusion(lh, InclusionProof(3, 8, good.audit_path + (b"\x00" * 32,)), t.root())
    assert not verify_inclusion(lh, InclusionProof(8, 8, good.audit_path), t.root())
    assert not verify_inclusion(lh, InclusionProof(3, 0, ()), t.root())
    assert root_from_inclusion(lh, InclusionProof(9, 8, good.audit_path)) is None


def test_consistency_edge_cases():
    t = tree_of(CT_LEAVES)
    root = t.root()
    assert verify_consistency(root, root, ConsistencyProof(8, 8, ()))
    assert not verify_consistency(root, t.root(7), ConsistencyProof(8, 8, ()))
    assert not verify_consistency(EMPTY_ROOT, root, ConsistencyProof(0, 8, ()))
    assert not verify_consistency(t.root(5), root, ConsistencyProof(9, 8, ()))
    good = ConsistencyProof(5, 8, tuple(t.consistency_path(5, 8)))
    assert verify_consistency(t.root(5), root, good)
    assert not verify_consistency(t.root(5), root, ConsistencyProof(5, 8, good.path[:-1]))
    assert not verify_consistency(t.root(5), root, ConsistencyProof(5, 8, good.path + (root,)))
    assert not verify_consistency(t.root(4), root, good)


def test_exhaustive_consistency_soundness_small_trees():
    """No proof assembled from any subtree roots links a rewritten history."""
    rng = random.Random(11)
    for n in range(2, 6):
        for m in range(1, n):
            honest = [rng.randbytes(3) for _ in range(n)]
            for j in range(m):  # rewrite one leaf inside the old prefix
                forged = list(honest)
                forged[j] = b"rewritten"
                pool = sorted(oracle.all_subtree_roots(honest) | oracle.all_subtree_roots(forged))
                length = len(oracle.consistency(m, forged))
                old_root, new_root = oracle.mth(honest[:m]), oracle.mth(forged)
                for path in itertools.product(pool, repeat=length):
                    assert not verify_consistency(old_root, new_root, ConsistencyProof(m, n, tuple(path)))


def test_out_of_range_requests():
    t = tree_of([b"a", b"b", b"c"])
    with pytest.raises(OutOfRange):
        t.root(4)
    with pytest.raises(OutOfRange):
        t.inclusion_path(3, 3)
    with pytest.raises(OutOfRange):
        t.consistency_path(0, 3)
    with pytest.raises(OutOfRange):
        t.consistency_path(2, 4)


def test_tree_copy_is_independent():
    t = tree_of([b"a", b"b"])
    c = t.copy()
    c.append(leaf_hash(b"c"))
    assert t.size == 2 and c.size == 3
    assert t.root() == oracle.mth([b"a", b"b"])


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_body_format():
    cp = Checkpoint("log.example", 8, bytes.fromhex(CT_ROOTS[7]), 1700000000)
    assert cp.body() == b"log.example\n8\nXcnaeacGWamtVZy3Ad7ZoqudgjqtL0lgz+Nw7/RgQyg=\n1700000000\n"


def test_checkpoint_sign_verify_and_tamper():
    cp = sign_checkpoint_body("log.example", 8, bytes.fromhex(CT_ROOTS[7]), 1700000000, OPERATOR)
    assert verify_checkpoint(cp, OPERATOR.public_key)
    other = Identity.generate("other", Role.LOG_OPERATOR, b"x")
    assert not verify_checkpoint(cp, other.public_key)
    from dataclasses import replace

    for change in [
        {"origin": "log.example2"},
        {"tree_size": 9},
        {"root_hash": bytes.fromhex(CT_ROOTS[6])},
        {"timestamp": 1700000001},
        {"signature": bytes(64)},
    ]:
        assert not verify_checkpoint(replace(cp, **change), OPERATOR.public_key)
    assert Checkpoint.from_dict(cp.to_dict()) == cp
    later = replace(cp, timestamp=1800000000)
    assert cp.same_state(later) and cp != later


def test_checkpoint_rejects_malformed_fields():
    with pytest.raises(ValueError):
        sign_checkpoint_body("bad\norigin", 1, bytes(32), 0, OPERATOR)
    with pytest.raises(ValueError):
        sign_checkpoint_body("log", -1, bytes(32), 0, OPERATOR)
    assert not Checkpoint("log", 1, bytes(31), 0).well_formed()
    assert not Checkpoint("log", True, bytes(32), 0).well_formed()


# -- the log ------------------------------------------------------------------


def fixed_clock():
    return 1_700_000_000


def test_append_assigns_sequential_indices_and_signs():
    payloads = CT_LEAVES[1:]
    log = MerkleLog("log.example", OPERATOR, clock=fixed_clock)
    for i, p in enumerate(payloads):
        assert log.append(p) == i
    assert log.root() == oracle.mth(payloads)
    cp = log.latest_checkpoint()
    assert (cp.tree_size, cp.root_hash, cp.timestamp) == (7, oracle.mth(payloads), 1_700_000_000)
    assert verify_checkpoint(cp, OPERATOR.public_key)
    assert log.entries(2, 4) == payloads[2:4]
    assert log.leaf(3).leaf_hash == leaf_hash(payloads[3])
    p = log.prove_inclusion(5, 7)
    assert verify_inclusion(leaf_hash(payloads[5]), p, log.root())
    c = log.prove_consistency(3, 7)
    assert verify_consistency(log.root(3), log.root(7), c)


def test_log_without_operator_cannot_sign():
    log = MerkleLog("log.example")
    log.append(b"x")
    with pytest.raises(PermissionError):
        log.sign_checkpoint()


def test_empty_payload_rejected():
    log = MerkleLog("log.example", OPERATOR)
    with pytest.raises(ValueError):
        log.append(b"")


def test_persist_and_load_roundtrip(tmp_path):
    path = tmp_path / "log.bin"
    log = MerkleLog("log.example", OPERATOR, path, clock=fixed_clock)
    for p in CT_LEAVES[1:]:
        log.append(p)
    loaded = MerkleLog.load(path, operator=OPERATOR, clock=fixed_clock)
    assert loaded.size == 7 and loaded.root() == log.root()
    assert loaded.latest_checkpoint() == log.latest_checkpoint()
    assert loaded.load_report.truncated_at is None
    assert loaded.append(b"more") == 7
    again = MerkleLog.load(path, operator=OPERATOR)
    assert again.size == 8


def test_attach_refuses_existing_records(tmp_path):
    path = tmp_path / "log.bin"
    MerkleLog("log.example", OPERATOR, path).append(b"x")
    with pytest.raises(StorageError):
        MerkleLog("log.example", OPERATOR, path)


def test_partial_trailing_record_truncated_or_strict(tmp_path):
    path = tmp_path / "log.bin"
    log = MerkleLog("log.example", OPERATOR, path, clock=fixed_clock)
    log.append(b"first")
    log.append(b"second")
    good_len = path.stat().st_size
    with open(path, "ab") as fh:
        fh.write((100).to_bytes(4, "big") + b"partial")
    with pytest.raises(LogCorruptionError) as exc:
        MerkleLog.load(path, operator=OPERATOR, strict=True)
    assert exc.value.offset == good_len
    loaded = MerkleLog.load(path, operator=OPERATOR)
    assert loaded.size == 2
    assert loaded.load_report.truncated_at == good_len
    assert loaded.load_report.truncated_bytes == 11
    assert path.stat().st_size == good_len


def test_partial_header_is_truncated(tmp_path):
    path = tmp_path / "log.bin"
    MerkleLog("log.example", OPERATOR, path).append(b"first")
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00")
    loaded = MerkleLog.load(path, operator=OPERATOR)
    assert loaded.size == 1 and loaded.load_report.truncated_bytes == 2


def test_zero_length_record_is_corruption(tmp_path):
    path = tmp_path / "log.bin"
    MerkleLog("log.example", OPERATOR, path).append(b"first")
    offset = path.stat().st_size
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x00\x00")
    with pytest.raises(LogCorruptionError) as exc:
        MerkleLog.load(path, operator=OPERATOR)
    assert exc.value.offset == offset


def test_rewritten_record_disagrees_with_checkpoint(tmp_path):
    path = tmp_path / "log.bin"
    log = MerkleLog("log.example", OPERATOR, path)
    log.append(b"first")
    log.append(b"second")
    data = bytearray(path.read_bytes())
    data[4] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(LogCorruptionError) as exc:
        MerkleLog.load(path, operator=OPERATOR)
    assert "checkpoint" in str(exc.value)


def test_checkpoint_from_other_key_is_rejected(tmp_path):
    path = tmp_path / "log.bin"
    MerkleLog("log.example", OPERATOR, path).append(b"first")
    other = Identity.generate("other", Role.LOG_OPERATOR, b"y")
    with pytest.raises(LogCorruptionError):
        MerkleLog.load(path, operator=other)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        MerkleLog.load(tmp_path / "absent.bin", origin="log.example")


def test_concurrent_appends_serialize(tmp_path):
    log = MerkleLog("log.example", OPERATOR, tmp_path / "log.bin", fsync=False)
    indices: list[int] = []
    lock = threading.Lock()

    def writer(w: int) -> None:
        for i in range(50):
            idx = log.append(f"w{w}-{i}".encode())
            with lock:
                indices.append(idx)

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(indices) == list(range(400))
    stored = log.entries(0, 400)
    assert log.root() == oracle.mth(stored)
    assert MerkleLog.load(tmp_path / "log.bin", operator=OPERATOR).root() == log.root()


def test_readers_see_consistent_prefixes_during_writes():
    log = MerkleLog("log.example", OPERATOR, fsync=False)
    stop = threading.Event()
    errors: list[str] = []

    def reader() -> None:
        while not stop.is_set():
            cp = log.latest_checkpoint()
            if cp.tree_size and log.root(cp.tree_size) != cp.root_hash:
                errors.append(f"mismatch at {cp.tree_size}")

    t = threading.Thread(target=reader)
    t.start()
    for i in range(300):
        log.append(b"%d" % i)
    stop.set()
    t.join()
    assert not errors


def test_copy_diverges_independently():
    log = MerkleLog("log.example", OPERATOR, clock=fixed_clock)
    log.append(b"a")
    fork = log.copy()
    fork.append(b"b")
    log.append(b"c")
    assert log.size == fork.size == 2
    assert log.root() != fork.root()
    assert log.root(1) == fork.root(1)
