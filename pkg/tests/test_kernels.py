from __future__ import annotations

import importlib
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

import oracle
from cctransparency import _purepy, kernels

try:
    from cctransparency import _native
except ImportError:  # extension not built
    _native = None

BACKENDS = [pytest.param(_purepy, id="python")]
BACKENDS.append(
    pytest.param(_native, id="cython", marks=pytest.mark.skipif(_native is None, reason="extension not built"))
)

payload_lists = st.lists(st.binary(max_size=64), max_size=70)


@pytest.mark.parametrize("impl", BACKENDS)
def test_leaf_and_node_match_oracle(impl):
    assert impl.leaf_hash(b"") == oracle.leaf(b"")
    assert impl.leaf_hash(b"abc") == oracle.leaf(b"abc")
    left, right = oracle.leaf(b"l"), oracle.leaf(b"r")
    assert impl.node_hash(left, right) == oracle.h(b"\x01" + left + right)


@pytest.mark.parametrize("impl", BACKENDS)
@settings(max_examples=60, deadline=None)
@given(payloads=payload_lists)
def test_range_root_matches_oracle(impl, payloads):
    leaves = impl.hash_leaves(payloads)
    assert leaves == [oracle.leaf(p) for p in payloads]
    for start in range(0, len(payloads), 7):
        for end in range(start + 1, len(payloads) + 1, 5):
            assert impl.range_root(leaves, start, end) == oracle.mth(payloads[start:end])


@pytest.mark.parametrize("impl", BACKENDS)
@settings(max_examples=40, deadline=None)
@given(payloads=payload_lists, cut=st.integers(min_value=0, max_value=70))
def test_extend_levels_incremental_equals_batch(impl, payloads, cut):
    cut = min(cut, len(payloads))
    leaves = impl.hash_leaves(payloads)
    batch: list = [[]]
    impl.extend_levels(batch, leaves)
    incremental: list = [[]]
    impl.extend_levels(incremental, leaves[:cut])
    impl.extend_levels(incremental, leaves[cut:])
    assert batch == incremental
    for k, row in enumerate(batch):
        width = 1 << k
        assert len(row) == len(payloads) // width
        for i, node in enumerate(row):
            assert node == oracle.mth(payloads[i * width:(i + 1) * width])


@pytest.mark.parametrize("impl", BACKENDS)
def test_range_root_rejects_bad_ranges(impl):
    leaves = impl.hash_leaves([b"a", b"b"])
    for start, end in [(0, 0), (1, 0), (0, 3), (-1, 1)]:
        with pytest.raises(ValueError):
            impl.range_root(leaves, start, end)


@pytest.mark.skipif(_native is None, reason="extension not built")
@settings(max_examples=50, deadline=None)
@given(payloads=payload_lists)
def test_backends_bit_identical(payloads):
    a, b = _purepy.hash_leaves(payloads), _native.hash_leaves(payloads)
    assert a == b
    la: list = [[]]
    lb: list = [[]]
    _purepy.extend_levels(la, a)
    _native.extend_levels(lb, b)
    assert la == lb
    if payloads:
        assert _purepy.range_root(a, 0, len(a)) == _native.range_root(b, 0, len(b))


def test_env_var_forces_python_backend():
    code = "from cctransparency import kernels; print(kernels.BACKEND)"
    out = subprocess.run(
        [sys.executable, "-c", code], env={**__import__("os").environ, "CCT_PURE_PYTHON": "1"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


def test_default_backend_reported():
    importlib.reload(kernels)
    assert kernels.BACKEND in ("cython", "python")
    if _native is not None:
        assert kernels.BACKEND == "cython"
