"""Train the toy benchmark across seeds and entropy weights; print a metrics table.

    python scripts/run_lambda_sweep.py --seeds 0 1 2 --lambdas 0 3 30 --out sweep.csv
"""

import argparse
import csv
import dataclasses
import time

from sscdkit.losses import LossConfig
from sscdkit.toy_bench import TrainConfig, train

COLUMNS = ("seed", "lam", "micro_ap", "recall_at_1", "mrr", "effective_rank", "max_min_ratio", "separation_gap")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 3.0, 30.0])
    p.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    p.add_argument("--lr", type=float, default=TrainConfig().lr)
    p.add_argument("--out", help="optional CSV path")
    args = p.parse_args()

    rows = []
    t0 = time.perf_counter()
    for seed in args.seeds:
        for lam in args.lambdas:
            cfg = dataclasses.replace(TrainConfig(), seed=seed, epochs=args.epochs, lr=args.lr, loss=LossConfig(lam=lam))
            _, _, r = train(cfg, eval_every_epoch=False)
            row = (seed, lam, r.micro_ap, r.recall_at_1, r.mrr, r.effective_rank, r.max_min_ratio, r.separation_gap)
            rows.append(row)
            print(" ".join(f"{k}={v:.4g}" for k, v in zip(COLUMNS, row)), flush=True)
    print(f"{len(rows)} runs in {time.perf_counter() - t0:.1f}s")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(COLUMNS)
            w.writerows(rows)


if __name__ == "__main__":
    main()
