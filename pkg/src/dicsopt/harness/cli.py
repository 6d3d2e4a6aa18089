"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
The output directory is taken from ``--out``, then the ``DICSOPT_OUT``
environment variable, then the config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, ExperimentConfig, default_config

OUT_ENV = "DICSOPT_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="parallel replica workers")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dicsopt", description="Sparsified consensus and optimization experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("consensus", "run sparsified average consensus"),
                       ("optimize", "run an optimizer on linear or logistic regression"),
                       ("spectra", "measure block-product spectra"),
                       ("theory", "evaluate rate constants and verify the error recursions")):
        _common(sub.add_parser(name, help=text))
    rp = sub.add_parser("reproduce", help="run the bundled reproduction suites")
    _common(rp)
    rp.add_argument("--suite", action="append", choices=("all", "consensus", "linreg", "logreg",
                                                         "spectra", "theory"),
                    help="suite to run (repeatable, default all)")
    rp.add_argument("--quick", action="store_true", help="shorter optimization runs")
    return parser


def _resolve_out(args, cfg_out):
    if args.out:
        return args.out
    return os.environ.get(OUT_ENV) or cfg_out


def _load(args, kind):
    cfg = ExperimentConfig.load(args.config) if args.config else default_config(kind)
    expected = {"optimize": ("linreg", "logreg")}.get(kind, (kind,))
    if cfg.kind not in expected:
        raise ConfigError(f"config kind {cfg.kind!r} does not fit the {kind!r} command "
                          f"(expected {' or '.join(expected)})")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.out = _resolve_out(args, cfg.out)
    return cfg.validate()


def _run(args) -> int:
    from .experiments import SUITES, reproduce, run_experiment

    if args.command == "reproduce":
        if args.config:
            raise ConfigError("reproduce takes no --config; its suites are fixed")
        suites = args.suite or ["all"]
        suites = SUITES if "all" in suites else tuple(dict.fromkeys(suites))
        out = _resolve_out(args, "results/reproduce")
        index = reproduce(out, suites, seed=args.seed or 0, workers=args.workers or 1,
                          quick=args.quick)
        print(f"reproduce: {', '.join(suites)} done in {index['wall_time_total']:.1f}s -> {out}")
        return EXIT_OK
    cfg = _load(args, args.command)
    res = run_experiment(cfg)
    brief = {k: v for k, v in res.summary.items() if isinstance(v, (int, float, str, bool, type(None)))}
    print(json.dumps(brief, sort_keys=True))
    print(f"{args.command}: wrote {len(res.paths)} files to {res.paths['summary'].parent}")
    return EXIT_OK


def main(argv=None) -> int:
    """Parse ``argv`` and run; returns the process exit code."""
    from .experiments import StageError

    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"dicsopt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"dicsopt: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError, OSError, ArithmeticError) as exc:
        print(f"dicsopt: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
