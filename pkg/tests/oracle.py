"""Brute-force Merkle oracle, written straight from the recursive definitions.

Deliberately shares no code with ``cctransparency``: hashing via hashlib
and plain recursion. Subtree roots are memoized on the exact tuple of
payloads, which changes speed but not results.
"""

import functools
import hashlib


def h(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def leaf(payload: bytes) -> bytes:
    return h(b"\x00" + payload)


def split(n: int) -> int:
    k = 1
    while k * 2 < n:
        k *= 2
    return k


def mth(payloads) -> bytes:
    return _mth(tuple(payloads))


@functools.lru_cache(maxsize=1 << 16)
def _mth(payloads: tuple) -> bytes:
    n = len(payloads)
    if n == 0:
        return h(b"")
    if n == 1:
        return leaf(payloads[0])
    k = split(n)
    return h(b"\x01" + _mth(payloads[:k]) + _mth(payloads[k:]))


def path(m: int, payloads: list) -> list:
    n = len(payloads)
    if n == 1:
        return []
    k = split(n)
    if m < k:
        return path(m, payloads[:k]) + [mth(payloads[k:])]
    return path(m - k, payloads[k:]) + [mth(payloads[:k])]


def subproof(m: int, payloads: list, complete: bool) -> list:
    n = len(payloads)
    if m == n:
        return [] if complete else [mth(payloads)]
    k = split(n)
    if m <= k:
        return subproof(m, payloads[:k], complete) + [mth(payloads[k:])]
    return subproof(m - k, payloads[k:], False) + [mth(payloads[:k])]


def consistency(m: int, payloads: list) -> list:
    return subproof(m, payloads, True)


def all_subtree_roots(payloads: list) -> set:
    """Root of every contiguous range of leaves: the candidate pool for
    exhaustive proof search."""
    out = set()
    n = len(payloads)
    for a in range(n):
        for b in range(a + 1, n + 1):
            out.add(mth(payloads[a:b]))
    return out
