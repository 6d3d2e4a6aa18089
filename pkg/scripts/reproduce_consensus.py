"""Consensus residual vs steps and vs communication for B in {1, 10} and q in {1, 0.078}.

Usage: python scripts/reproduce_consensus.py [--out DIR] [--seed N] [--workers N]
"""

import argparse
import json

from dicsopt.harness.experiments import reproduce


def main():
    parser = argparse.ArgumentParser(description="Consensus residual vs steps and vs communication for B in {1, 10} and q in {1, 0.078}.")
    parser.add_argument("--out", default="results/consensus")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()
    index = reproduce(args.out, ("consensus",), seed=args.seed, workers=args.workers)
    print(json.dumps(index["suites"]["consensus"]["result"], indent=2, default=str))


if __name__ == "__main__":
    main()
