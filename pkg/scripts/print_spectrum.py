"""Print the principal spectrum of toy descriptors at two entropy weights.

    python scripts/print_spectrum.py --seed 0
"""

import argparse

import numpy as np

from sscdkit.descriptor_core import principal_spectrum
from sscdkit.losses import LossConfig
from sscdkit.toy_bench import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 30.0])
    args = p.parse_args()

    for lam in args.lambdas:
        _, _, probe = train(TrainConfig(seed=args.seed, loss=LossConfig(lam=lam)), eval_every_epoch=False)
        rep = principal_spectrum(probe.refs)
        vals = np.asarray(rep.principal_values)
        top = vals / vals.max()
        print(f"lambda={lam:g} effective rank {rep.effective_rank:.2f}")
        for i, v in enumerate(top):
            print(f"  {i:3d} {v:8.4f} {'#' * int(round(40 * v))}")


if __name__ == "__main__":
    main()
