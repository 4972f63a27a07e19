"""Command-line entry point: ``mvsde <subcommand> --config PATH``."""

import argparse
import logging
import os
import sys

from .config import load_config, parse_config
from .errors import BlowUpError, ConfigError, InvalidInputError
from .experiments import run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BLOWUP = 3
EXIT_CRITERION = 4
OUT_ENV = "MVSDE_OUT"

SUBCOMMANDS = {
    "simulate": "simulate",
    "averaging": "averaging",
    "stability": "stability",
    "ito-check": "ito_check",
    "audit": "audits",
}

log = logging.getLogger("mvsde")


def build_parser():
    parser = argparse.ArgumentParser(prog="mvsde", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override solver.seed")
        p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
        p.add_argument("--strict", action="store_true", help="exit 4 when a criterion fails")
        p.add_argument("--threads", type=int, help="override solver.threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    kind = SUBCOMMANDS[args.command]
    try:
        cfg = load_config(args.config, kind)
        if args.seed is not None or args.threads is not None:
            doc = cfg.to_dict()
            if args.seed is not None:
                doc["solver"]["seed"] = args.seed
            if args.threads is not None:
                doc["solver"]["threads"] = args.threads
            cfg = parse_config(doc, kind)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = args.out or os.environ.get(OUT_ENV) or cfg.output["directory"]
    try:
        report = run_experiment(cfg, out)
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except InvalidInputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in report.csv_paths:
        print(path)
    for note in report.notes:
        log.info(note)
    if not report.passed:
        print(f"{report.kind}: one or more criteria failed", file=sys.stderr)
        if args.strict:
            return EXIT_CRITERION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
