"""shellflow command-line entry point.

    python shellflow.py <experiment> --config PATH [--seed S] [--out DIR] [--format csv|json|plotdata]

Exit status: 0 success, 2 configuration error, 3 numerical divergence,
4 failed identity check or degenerate data.
"""

import argparse
import logging
import sys

from experiments.config import EXPERIMENTS, FORMATS, ConfigLoader
from experiments.recipes import run_experiment
from models.errors import ShellflowError

logger = logging.getLogger('shellflow')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='shellflow',
        description='Spectral-shell experiments on gradient-flow training and its transport PDE',
    )
    parser.add_argument('experiment', choices=EXPERIMENTS)
    parser.add_argument('--config', required=True, help='flat JSON config file')
    parser.add_argument('--seed', type=int, help='run a single seed instead of the config seed list')
    parser.add_argument('--out', help='output directory (default $SHELLFLOW_OUTPUT_DIR/<experiment>)')
    parser.add_argument('--format', choices=FORMATS, help='table format')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    overrides = {'experiment': args.experiment}
    if args.seed is not None:
        overrides['seeds'] = [args.seed]
    if args.out:
        overrides['output_dir'] = args.out
    if args.format:
        overrides['format'] = args.format

    try:
        cfg = ConfigLoader.load(args.config, overrides)
        written = run_experiment(cfg)
    except ShellflowError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    logger.info(f"{cfg.experiment} finished: {len(written)} files under {cfg.output_dir}")
    return 0


if __name__ == '__main__':
    sys.exit(main())
