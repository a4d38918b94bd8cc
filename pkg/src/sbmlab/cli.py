"""``sbmlab <subcommand> --config FILE [--seed S] [--workers W] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import config as cfgmod
from .bp import BPError
from .config import ConfigError
from .experiments import COMMANDS
from .graph_model import ParametrizationError, PatternError
from .spectral import SpectralError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sbmlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML experiment file")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", default=None, help="override output.dir")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.override(cfgmod.load(args.config), seed=args.seed, out=args.out)
        if cfg.kind != args.command:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.command!r}")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        fn = COMMANDS[args.command]
        if args.command == "generate":
            fn(cfg)
        else:
            fn(cfg, workers=args.workers)
    except (ConfigError, ParametrizationError, PatternError, SpectralError) as exc:
        print(f"sbmlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BPError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"sbmlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
