"""Compiled vs numpy selection kernels at the Wine, Cancer and Digits sizes.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each cell is the best of ``--repeat`` timed calls, in milliseconds.
"""
import argparse
import json
import timeit

import numpy as np
from scipy import sparse

from glgnn.graph_ops import hop_powers, knn_graph
from glgnn.kernels import _pykernels

try:
    from glgnn.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

# (name, N, top-k) as configured for each dataset
SIZES = [("wine", 178, 90), ("cancer", 569, 110), ("digits", 1797, 15)]


def cases(n, k, rng):
    X = rng.standard_normal((n, 16))
    Z = rng.standard_normal((n, 24))
    S = Z @ Z.T
    reach = hop_powers(sparse.csr_array(knn_graph(X, 10)), 2).reach
    indptr = reach.indptr.astype(np.int64)
    indices = reach.indices.astype(np.int64)
    near = rng.uniform(0.2, 1.0, reach.nnz)
    return {
        "topk_select": lambda m: m.topk_select(S, k, False),
        "gram": lambda m: m.gram(Z),
        "relation_topk": lambda m: m.relation_topk(S, indptr, indices, near, 0.3, k),
        # the fused kernel overwrites its input, so time it on a fresh copy
        "softmax_relation_topk": lambda m: m.softmax_relation_topk(
            S.copy(), indptr, indices, near, 0.3, k, True),
    }


def best_ms(fn, repeat):
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'dataset':8} {'N':>5} {'k':>4} {'kernel':22} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, n, k in SIZES:
        for kernel, call in cases(n, k, rng).items():
            py = best_ms(lambda: call(_pykernels), args.repeat)
            cy = best_ms(lambda: call(_ckernels), args.repeat) if _ckernels else None
            rows.append({"dataset": name, "N": n, "k": k, "kernel": kernel,
                         "numpy_ms": py, "cython_ms": cy})
            cy_txt = f"{cy:10.2f} {py / cy:7.1f}x" if cy else f"{'n/a':>10} {'':>8}"
            print(f"{name:8} {n:5d} {k:4d} {kernel:22} {py:10.2f} {cy_txt}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
