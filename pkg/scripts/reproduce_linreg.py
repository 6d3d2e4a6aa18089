"""Linear regression: SVRG at several q against full-gradient and plain SGD tracking, B in {1, 3, 5}.

Usage: python scripts/reproduce_linreg.py [--out DIR] [--seed N] [--workers N] [--quick]
"""

import argparse
import json

from dicsopt.harness.experiments import reproduce


def main():
    parser = argparse.ArgumentParser(description="Linear regression: SVRG at several q against full-gradient and plain SGD tracking, B in {1, 3, 5}.")
    parser.add_argument("--out", default="results/linreg")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--quick", action="store_true", help="2000-block runs")
    args = parser.parse_args()
    index = reproduce(args.out, ("linreg",), seed=args.seed, workers=args.workers, quick=args.quick)
    print(json.dumps(index["suites"]["linreg"]["result"], indent=2, default=str))


if __name__ == "__main__":
    main()
