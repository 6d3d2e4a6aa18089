"""Second eigenvalue moduli of window products over 20 seeds, B in {1, 10}, q in {1, 0.25, 0.078}.

Usage: python scripts/spectra_sweep.py [--out DIR] [--seed N] [--workers N]
"""

import argparse
import json

from dicsopt.harness.experiments import reproduce


def main():
    parser = argparse.ArgumentParser(description="Second eigenvalue moduli of window products over 20 seeds, B in {1, 10}, q in {1, 0.25, 0.078}.")
    parser.add_argument("--out", default="results/spectra")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()
    index = reproduce(args.out, ("spectra",), seed=args.seed, workers=args.workers)
    print(json.dumps(index["suites"]["spectra"]["result"], indent=2, default=str))


if __name__ == "__main__":
    main()
