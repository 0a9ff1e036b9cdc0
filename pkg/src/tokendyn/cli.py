"""Run token-dynamics experiments and write CSV and JSON results.

.. code-block:: text

    tokendyn <subcommand> [--config FILE] [--out DIR] [--seed U64] [--trials N]
             [--workers N] [--no-timestamp]

Exit status is 0 on success, 2 for configuration errors and 3 for numerical
failures.
"""

from __future__ import annotations

import argparse
import sys

from .config import EXPERIMENTS, default_config, load_config, resolve_config
from .errors import ConfigError, NumericalFailure
from .experiments import run_experiment
from .output import write_outputs

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokendyn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name.replace("_", "-"), help=f"run the {name.replace('_', ' ')} experiment")
        p.add_argument("--config", help="JSON configuration (defaults to the built-in one)")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--trials", type=int, help="override the number of trials")
        p.add_argument("--workers", type=int, default=1, help="worker processes for trials")
        p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp line in the CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    experiment = args.command.replace("-", "_")
    try:
        cfg = load_config(args.config) if args.config else default_config(experiment)
        if cfg["experiment"] != experiment:
            raise ConfigError(
                f"configuration is for {cfg['experiment']!r} but subcommand is {experiment!r}"
            )
        if args.seed is not None:
            cfg["master_seed"] = args.seed
        if args.trials is not None:
            cfg["trials"] = args.trials
        cfg = resolve_config(cfg)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg, workers=args.workers)
    except NumericalFailure as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    csv_path, json_path = write_outputs(result, args.out, timestamp=not args.no_timestamp)
    print(f"wrote {csv_path} and {json_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
