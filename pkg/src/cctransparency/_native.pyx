# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled Merkle hashing kernels backed by OpenSSL's SHA-256.

Mirrors ``_purepy`` function for function; outputs are bit-identical.
"""

from libc.stdlib cimport malloc, free
from libc.string cimport memcpy

cdef extern from "openssl/evp.h" nogil:
    ctypedef struct EVP_MD
    ctypedef struct EVP_MD_CTX
    ctypedef struct ENGINE
    const EVP_MD *EVP_sha256()
    EVP_MD_CTX *EVP_MD_CTX_new()
    void EVP_MD_CTX_free(EVP_MD_CTX *ctx)
    int EVP_DigestInit_ex(EVP_MD_CTX *ctx, const EVP_MD *type, ENGINE *impl)
    int EVP_DigestUpdate(EVP_MD_CTX *ctx, const void *d, size_t cnt)
    int EVP_DigestFinal_ex(EVP_MD_CTX *ctx, unsigned char *md, unsigned int *s)
    int EVP_Digest(const void *data, size_t count, unsigned char *md,
                   unsigned int *size, const EVP_MD *type, ENGINE *impl)

DEF DIGEST = 32

cdef const EVP_MD *_MD = EVP_sha256()
cdef unsigned char _LEAF = 0
cdef unsigned char _NODE = 1


cdef inline int _node(const unsigned char *left, const unsigned char *right,
                      unsigned char *out) noexcept nogil:
    cdef unsigned char buf[1 + 2 * DIGEST]
    cdef unsigned int n
    buf[0] = _NODE
    memcpy(buf + 1, left, DIGEST)
    memcpy(buf + 1 + DIGEST, right, DIGEST)
    return EVP_Digest(buf, 1 + 2 * DIGEST, out, &n, _MD, NULL)


cdef bytes _leaf(EVP_MD_CTX *ctx, bytes payload):
    cdef unsigned char out[DIGEST]
    cdef unsigned int n
    cdef const unsigned char *data = payload
    if (EVP_DigestInit_ex(ctx, _MD, NULL) != 1
            or EVP_DigestUpdate(ctx, &_LEAF, 1) != 1
            or EVP_DigestUpdate(ctx, data, len(payload)) != 1
            or EVP_DigestFinal_ex(ctx, out, &n) != 1):
        raise RuntimeError("SHA-256 failed")
    return out[:DIGEST]


cdef bytes _checked(object digest):
    if not isinstance(digest, bytes) or len(<bytes>digest) != DIGEST:
        raise ValueError("expected a 32-byte digest")
    return <bytes>digest


def leaf_hash(bytes payload):
    cdef EVP_MD_CTX *ctx = EVP_MD_CTX_new()
    if ctx == NULL:
        raise MemoryError()
    try:
        return _leaf(ctx, payload)
    finally:
        EVP_MD_CTX_free(ctx)


def node_hash(bytes left, bytes right):
    cdef unsigned char out[DIGEST]
    _checked(left)
    _checked(right)
    if _node(left, right, out) != 1:
        raise RuntimeError("SHA-256 failed")
    return out[:DIGEST]


def hash_leaves(payloads):
    cdef EVP_MD_CTX *ctx = EVP_MD_CTX_new()
    if ctx == NULL:
        raise MemoryError()
    try:
        return [_leaf(ctx, p) for p in payloads]
    finally:
        EVP_MD_CTX_free(ctx)


def extend_levels(list levels, leaf_hashes):
    """Append leaf hashes to a perfect-subtree level cache in place."""
    cdef unsigned char out[DIGEST]
    cdef Py_ssize_t k
    cdef list row
    cdef bytes left, right
    if not levels:
        levels.append([])
    for h in leaf_hashes:
        (<list>levels[0]).append(_checked(h))
        k = 0
        while len(<list>levels[k]) % 2 == 0:
            row = <list>levels[k]
            left = <bytes>row[len(row) - 2]
            right = <bytes>row[len(row) - 1]
            _node(left, right, out)
            if k + 1 == len(levels):
                levels.append([])
            (<list>levels[k + 1]).append(out[:DIGEST])
            k += 1


def range_root(leaf_hashes, Py_ssize_t start, Py_ssize_t end):
    """Merkle tree hash of ``leaf_hashes[start:end]`` (``end > start``)."""
    cdef Py_ssize_t total = len(leaf_hashes)
    cdef Py_ssize_t n, i, width
    cdef unsigned char *buf
    cdef bytes h
    if not (0 <= start < end <= total):
        raise ValueError(f"bad range [{start}, {end}) for {total} leaves")
    n = end - start
    buf = <unsigned char *>malloc(n * DIGEST)
    if buf == NULL:
        raise MemoryError()
    try:
        for i in range(n):
            h = _checked(leaf_hashes[start + i])
            memcpy(buf + i * DIGEST, <const unsigned char *>h, DIGEST)
        width = n
        with nogil:
            while width > 1:
                for i in range(width // 2):
                    _node(buf + 2 * i * DIGEST, buf + (2 * i + 1) * DIGEST,
                          buf + i * DIGEST)
                if width % 2:
                    memcpy(buf + (width // 2) * DIGEST,
                           buf + (width - 1) * DIGEST, DIGEST)
                width = (width + 1) // 2
        return buf[:DIGEST]
    finally:
        free(buf)
