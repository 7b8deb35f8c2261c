"""Real-only versus real + filtered generated data on the 8x8 synthetic image task.

The generated pool comes from a per-class Gaussian fitted to the real set,
scored by the real-only model; the bottom fraction is dropped before mixing.
"""
import argparse

import numpy as np

from lipcert.data import MixSpec, Pool, generated_pool, make_synthetic_images, network_scorer
from lipcert.network import build_liresnet
from lipcert.train import (
    EPS_GRID, AblationRow, TrainConfig, ablation_table, train, with_overrides,
)


def build(seed):
    return build_liresnet((1, 8, 8), 4, channels=4, blocks=2, dense_depth=2, dense_width=64,
                          rng=np.random.default_rng(seed))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--n-real", type=int, default=200)
    ap.add_argument("--n-generated", type=int, default=4000)
    ap.add_argument("--ratios", default="1:0,1:1,1:3", help="real:generated batch ratios")
    ap.add_argument("--filter", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    x, y = make_synthetic_images(args.n_real, seed=args.seed)
    xt, yt = make_synthetic_images(1000, seed=args.seed + 1)
    real = Pool(x, y)
    base = TrainConfig(epsilon_train=0.3, epochs=args.epochs, mix=MixSpec(1, 0, 32),
                       eval_eps=EPS_GRID, seed=args.seed, record_time=False)
    scorer_net, _ = train(build(args.seed), real, None, base, eval_data=(xt, yt))
    gen = generated_pool(real, 4, args.n_generated, network_scorer(scorer_net), args.filter,
                         seed=args.seed + 3)
    rows = []
    for ratio in args.ratios.split(","):
        cfg = with_overrides(base, mix=MixSpec.parse(ratio, 32))
        _, log = train(build(args.seed), real, gen if cfg.mix.generated_parts else None, cfg,
                       eval_data=(xt, yt))
        last = log.final
        rows.append(AblationRow(ratio, last["clean_acc"], last["vra"], 0.0))
        print(f"{ratio}: clean {last['clean_acc']:.3f} VRA {last['vra']}", flush=True)
    print(ablation_table(rows, EPS_GRID, markdown=True))


if __name__ == "__main__":
    main()
