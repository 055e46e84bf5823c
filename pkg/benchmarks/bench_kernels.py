"""Time the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--records N] [--dims D] [--repeat R]
"""

from __future__ import annotations

import argparse
import random
import timeit
from array import array

from ctirules import _kernels_py

try:
    from ctirules import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def workloads(records: int, dims: int, seed: int = 0):
    rng = random.Random(seed)
    flat = array("d", (rng.gauss(0, 1) for _ in range(records * dims)))
    query = array("d", (rng.gauss(0, 1) for _ in range(dims)))
    pairs = [
        ("".join(rng.choice("ab*?") for _ in range(12)), "".join(rng.choice("ab") for _ in range(40)))
        for _ in range(2000)
    ]

    def scan(impl):
        norms = impl.row_norms(flat, dims)
        impl.cosine_scan(flat, dims, norms, query, impl.vector_norm(query))

    def wildcard(impl):
        for p, s in pairs:
            impl.wildcard_match(p, s)

    return {"cosine_scan": scan, "wildcard_match x2000": wildcard}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=int, default=5000)
    ap.add_argument("--dims", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    impls = [("python", _kernels_py)] + ([("cython", _kernels_c)] if _kernels_c else [])
    if _kernels_c is None:
        print("compiled kernels not built; timing the fallback only")
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name, _ in impls) + ("     speedup" if len(impls) == 2 else ""))
    for label, fn in workloads(args.records, args.dims).items():
        best = [min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) for _, impl in impls]
        row = f"{label:<22}" + "".join(f"{t * 1e3:>10.2f}ms" for t in best)
        if len(best) == 2:
            row += f"{best[0] / best[1]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
