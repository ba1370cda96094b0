"""Merkle hashing kernels, compiled when available.

The Cython extension (``_native``) is used unless it failed to build or
``CCT_PURE_PYTHON`` is set to a non-empty value other than ``0``.
``BACKEND`` names the implementation in use.
"""

from __future__ import annotations

import os

from . import _purepy

_force_python = os.environ.get("CCT_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    _impl = _purepy
    BACKEND = "python"
else:
    try:
        from . import _native as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _purepy
        BACKEND = "python"

leaf_hash = _impl.leaf_hash
node_hash = _impl.node_hash
hash_leaves = _impl.hash_leaves
extend_levels = _impl.extend_levels
range_root = _impl.range_root

__all__ = [
    "BACKEND",
    "leaf_hash",
    "node_hash",
    "hash_leaves",
    "extend_levels",
    "range_root",
]
