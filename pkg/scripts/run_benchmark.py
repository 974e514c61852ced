"""Time exhaustive search and whitening fits at a chosen scale.

    python scripts/run_benchmark.py --refs 1000000 --queries 1000 --dim 512
"""

import argparse
import time

import numpy as np

from sscdkit.descriptor_core import DescriptorSet, fit_whitening
from sscdkit.retrieval_eval import knn_search


def unit_rows(rng, n, d, chunk=100_000):
    out = np.empty((n, d), dtype=np.float32)
    for s in range(0, n, chunk):
        x = rng.standard_normal((min(chunk, n - s), d), dtype=np.float32)
        out[s : s + len(x)] = x / np.linalg.norm(x, axis=1, keepdims=True)
    out.setflags(write=False)
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--refs", type=int, default=1_000_000)
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--fit-rows", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    refs = DescriptorSet(tuple(f"r{i}" for i in range(args.refs)), unit_rows(rng, args.refs, args.dim), True)
    queries = DescriptorSet(tuple(f"q{i}" for i in range(args.queries)), unit_rows(rng, args.queries, args.dim), True)
    t0 = time.perf_counter()
    knn_search(queries, refs, args.k)
    print(f"search {args.queries} x {args.refs} x {args.dim}: {time.perf_counter() - t0:.1f}s")
    del refs

    bg = rng.standard_normal((args.fit_rows, args.dim))
    t0 = time.perf_counter()
    fit_whitening(bg)
    print(f"whitening fit {args.fit_rows} x {args.dim}: {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
