"""Command-line entry point.

Precedence, lowest to highest: profile defaults, ``--config`` file,
``CFIDD_*`` environment variables (e.g. ``CFIDD_TRIALS=50``, ``CFIDD_K=10``),
command-line flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import harness, selection


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfidd", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="flat key = value file (scenario and experiment keys)")
    p.add_argument("--strategy", help="one or more of: " + ", ".join(s.value for s in selection.Strategy)
                   + " (comma separated)")
    p.add_argument("--snr", help="SNR points in dB: '0,5,10' or 'start:step:stop'")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, help="master seed (64-bit)")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--emit", help="comma separated subset of " + ",".join(harness.EMIT_KINDS))
    p.add_argument("--profile", choices=sorted(harness.PROFILES))
    p.add_argument("--n-outer", dest="n_outer", type=int)
    p.add_argument("--n-stat", dest="n_stat", type=int)
    p.add_argument("--no-soft-ic", dest="soft_ic", action="store_const", const=False,
                   help="feed decoder output back through the bit priors only")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    file_layer = harness.read_flat_config(args.config) if args.config else {}
    cli_layer = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    try:
        config = harness.build_config(file_layer, harness.env_overrides(), cli_layer)
    except (KeyError, ValueError) as exc:
        print(f"cfidd: configuration error: {exc}", file=sys.stderr)
        return 2
    start = time.perf_counter()
    metrics = harness.run_experiment(config)
    paths = harness.aggregate_and_emit(metrics, config)
    logging.getLogger("cfidd").info("%d units in %.1f s", len(metrics), time.perf_counter() - start)
    for path in paths:
        print(os.fspath(path))
    return 0
