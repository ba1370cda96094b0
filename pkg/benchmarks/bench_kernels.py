"""Compare the compiled and pure-Python Merkle kernels.

Run with ``python3 benchmarks/bench_kernels.py [--leaves N] [--repeat R]``.
Each kernel is timed on identical inputs and the outputs are checked
for equality before any timing is reported.
"""

from __future__ import annotations

import argparse
import os
import timeit

from cctransparency import _purepy

try:
    from cctransparency import _native
except ImportError:
    _native = None


def _cases(impl, payloads: list[bytes], leaves: list[bytes]) -> dict:
    def extend() -> None:
        impl.extend_levels([], leaves)

    return {
        "leaf_hash x N": lambda: [impl.leaf_hash(p) for p in payloads],
        "hash_leaves": lambda: impl.hash_leaves(payloads),
        "extend_levels": extend,
        "range_root": lambda: impl.range_root(leaves, 0, len(leaves)),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--leaves", type=int, default=10_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    payloads = [os.urandom(64) for _ in range(args.leaves)]
    leaves = _purepy.hash_leaves(payloads)
    if _native is None:
        print("compiled extension not built; only the pure-Python kernels are available")
    else:
        assert _native.hash_leaves(payloads) == leaves
        assert _native.range_root(leaves, 0, len(leaves)) == _purepy.range_root(leaves, 0, len(leaves))
        a: list = []
        b: list = []
        _native.extend_levels(a, leaves)
        _purepy.extend_levels(b, leaves)
        assert a == b

    impls = {"python": _purepy} | ({"cython": _native} if _native else {})
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name in impls) + ("     speedup" if _native else ""))
    timings = {name: _cases(impl, payloads, leaves) for name, impl in impls.items()}
    for case in timings["python"]:
        best = {name: min(timeit.repeat(cases[case], number=1, repeat=args.repeat)) for name, cases in timings.items()}
        row = f"{case:<16}" + "".join(f"{best[name] * 1e3:>10.2f}ms" for name in impls)
        if _native:
            row += f"{best['python'] / best['cython']:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
