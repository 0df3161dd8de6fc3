"""Train the same MNIST federation with and without the privacy pipeline.

Runs the desk config from configs/mnist_desk.cfg under each scheme and prints
per-round test accuracy side by side, then the final numbers.

    python3 demos/train_compare.py [--rounds 30] [--config configs/mnist_desk.cfg]
"""

import argparse
import time

from paimfl.config import SCHEMES, parse_config
from paimfl.fl_engine import load_datasets, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/mnist_desk.cfg")
    ap.add_argument("--rounds", type=int)
    args = ap.parse_args()

    cfg = parse_config(args.config)
    if args.rounds is not None:
        cfg = cfg.replace(rounds=args.rounds)
    train, test = load_datasets(cfg)

    curves = {}
    for scheme in SCHEMES:
        t0 = time.time()
        res = run_experiment(cfg.replace(scheme=scheme), train=train, test=test)
        curves[scheme] = [r.test_accuracy for r in res]
        print(f"{scheme:32s} {time.time() - t0:6.1f}s  final {curves[scheme][-1]:.4f}  "
              f"best {max(curves[scheme]):.4f}")

    print("\nround " + " ".join(f"{s[:14]:>14s}" for s in SCHEMES))
    for i in range(cfg.rounds):
        print(f"{i:5d} " + " ".join(f"{curves[s][i]:14.4f}" for s in SCHEMES))


if __name__ == "__main__":
    main()
