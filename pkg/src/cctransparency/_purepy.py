"""Pure-Python Merkle hashing kernels.

Same surface as the compiled ``_native`` module; used when the extension
is not built or when ``CCT_PURE_PYTHON=1`` is set.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"

_sha256 = hashlib.sha256


def leaf_hash(payload: bytes) -> bytes:
    return _sha256(LEAF_PREFIX + payload).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return _sha256(NODE_PREFIX + left + right).digest()


def hash_leaves(payloads: Iterable[bytes]) -> list[bytes]:
    return [_sha256(LEAF_PREFIX + p).digest() for p in payloads]


def extend_levels(levels: list[list[bytes]], leaf_hashes: Iterable[bytes]) -> None:
    """Append leaf hashes to a perfect-subtree level cache in place.

    ``levels[k][i]`` is the root of the perfect subtree covering leaves
    ``[i * 2**k, (i + 1) * 2**k)``.
    """
    if not levels:
        levels.append([])
    for h in leaf_hashes:
        levels[0].append(h)
        k = 0
        while len(levels[k]) % 2 == 0:
            row = levels[k]
            parent = _sha256(NODE_PREFIX + row[-2] + row[-1]).digest()
            if k + 1 == len(levels):
                levels.append([])
            levels[k + 1].append(parent)
            k += 1


def range_root(leaf_hashes: Sequence[bytes], start: int, end: int) -> bytes:
    """Merkle tree hash of ``leaf_hashes[start:end]`` (``end > start``)."""
    if not 0 <= start < end <= len(leaf_hashes):
        raise ValueError(f"bad range [{start}, {end}) for {len(leaf_hashes)} leaves")
    row = list(leaf_hashes[start:end])
    # Bottom-up with odd tail promotion yields the left-balanced tree.
    while len(row) > 1:
        nxt = [
            _sha256(NODE_PREFIX + row[i] + row[i + 1]).digest()
            for i in range(0, len(row) - 1, 2)
        ]
        if len(row) % 2:
            nxt.append(row[-1])
        row = nxt
    return row[0]
