"""Train a small network on synthetic blobs and report training-set DICE.

    python scripts/desk_overfit.py --epochs 200 --out runs/desk
"""

import argparse
import time

from bionet.augment import AugmentConfig
from bionet.data import synth_blobs
from bionet.graph import BioNetConfig, build, param_summary
from bionet.train import TrainConfig, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--data-seed", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--t", type=int, default=2)
    ap.add_argument("--no-augment", action="store_true")
    ap.add_argument("--out", default=None, help="directory for the log and checkpoint")
    args = ap.parse_args()

    samples = synth_blobs(args.samples, args.size, seed=args.data_seed)
    net = build(BioNetConfig(l=2, mult=0.25, t=args.t, in_channels=1), seed=args.seed)
    print(f"parameters: {param_summary(net).total}")
    aug = None if args.no_augment else AugmentConfig()
    start = time.perf_counter()
    log = train(net, samples, TrainConfig(epochs=args.epochs, seed=args.seed), aug, args.out)
    every = max(1, args.epochs // 10)
    for rec in log.records[every - 1::every]:
        print(f"epoch {rec.epoch:4d}  loss {rec.loss:.4f}  lr {rec.lr:.5f}")
    report = evaluate(net, samples, ("dice", "iou", "rand_f"))
    print(f"elapsed {time.perf_counter() - start:.1f} s")
    print(report.to_kv())


if __name__ == "__main__":
    main()
