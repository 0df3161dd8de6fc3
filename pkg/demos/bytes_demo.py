"""Traffic per scheme and subsample ratio, from the byte ledger.

Only a few rounds are needed: byte counts depend on gamma and the wire
format, not on how well the model trains.

    python3 demos/bytes_demo.py [--rounds 3]
"""

import argparse

from paimfl.config import SCHEMES, parse_config
from paimfl.fl_engine import load_datasets
from paimfl.telemetry import scheme_comparison

GAMMAS = (0.07, 0.10, 0.15, 0.20, 0.25)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/mnist_desk.cfg")
    ap.add_argument("--rounds", type=int, default=3)
    args = ap.parse_args()

    cfg = parse_config(args.config).replace(rounds=args.rounds)
    train, test = load_datasets(cfg)
    table = scheme_comparison([cfg.replace(scheme=s, gamma=g) for g in GAMMAS for s in SCHEMES],
                              train, test)

    print(f"{'gamma':>6s} " + " ".join(f"{s[:20]:>20s}" for s in SCHEMES) + "   baseline/pa-imfl")
    for g in GAMMAS:
        cells = " ".join(f"{table.row(s, g)['total_bytes']:20d}" for s in SCHEMES)
        print(f"{g:6.2f} {cells}   {table.ratio(gamma=g):.3f}")


if __name__ == "__main__":
    main()
