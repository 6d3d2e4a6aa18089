"""Measure sigma, evaluate step size, epoch length and rate, and check the error recursions on sampled runs.

Usage: python scripts/theory_report.py [--out DIR] [--seed N] [--workers N]
"""

import argparse
import json

from dicsopt.harness.experiments import reproduce


def main():
    parser = argparse.ArgumentParser(description="Measure sigma, evaluate step size, epoch length and rate, and check the error recursions on sampled runs.")
    parser.add_argument("--out", default="results/theory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()
    index = reproduce(args.out, ("theory",), seed=args.seed, workers=args.workers)
    print(json.dumps(index["suites"]["theory"]["result"], indent=2, default=str))


if __name__ == "__main__":
    main()
