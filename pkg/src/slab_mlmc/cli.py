"""Command line entry point: ``slab-mlmc <command> --config PATH``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import STUDIES, StudyConfig
from .errors import ConfigError
from .studies import NUMERICAL_ERRORS, STUDY_RUNNERS

log = logging.getLogger("slab_mlmc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def build_parser():
    p = argparse.ArgumentParser(prog="slab-mlmc", description="Slab transport solver with MC/MLMC studies.")
    p.add_argument("command", choices=STUDIES)
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = StudyConfig.from_file(args.config, {"study": args.command, "seed": args.seed,
                                                  "workers": args.workers, "out": args.out})
        STUDY_RUNNERS[args.command](cfg, cfg.out)
    except ConfigError as exc:
        print(f"slab-mlmc: config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"slab-mlmc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    log.info("wrote results to %s", cfg.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
