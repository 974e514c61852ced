"""Train one toy encoder, then sweep score-normalization settings over its probe.

    python scripts/run_score_norm_sweep.py --seed 0 --lam 0 --k 10 --background 500
"""

import argparse

import numpy as np

from sscdkit.descriptor_core import DescriptorSet
from sscdkit.losses import LossConfig
from sscdkit.retrieval_eval import GroundTruth, knn_search, micro_ap
from sscdkit.score_norm import score_norm_sweep
from sscdkit.toy_bench import TrainConfig, generate_sources, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lam", type=float, default=0.0, help="entropy weight; lambda=0 leaves room to improve")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--background", type=int, default=500, help="number of distractor sources")
    args = p.parse_args()

    cfg = TrainConfig(seed=args.seed, loss=LossConfig(lam=args.lam))
    enc, _, probe = train(cfg, eval_every_epoch=False)
    src = generate_sources(args.background, cfg.m, args.seed + 10_000)
    background = DescriptorSet(tuple(f"b/{s.id}" for s in src), enc.encode(np.stack([s.vector for s in src])), True)
    gt = GroundTruth.from_pairs((q, "r/" + q[2:]) for q in probe.queries.ids)
    cands = knn_search(probe.queries, probe.refs, args.k)
    print(f"baseline uAP {micro_ap(cands, gt)[0]:.4f}")
    rows = score_norm_sweep(probe.queries, background, cands, gt)
    for r in sorted(rows, key=lambda r: -r["micro_ap"])[:10]:
        print(f"n={r['n']} n_end={r['n_end']} beta={r['beta']:.2f} uAP={r['micro_ap']:.4f} order_kept={r['ranking_preserved']}")


if __name__ == "__main__":
    main()
