import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from app.commands import bench, build_table, forward, verify
from app.config import load_run_config
from app.errors import VoxelHeightError, describe_validation_error

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelheight",
        description="Voxel height attention: mapping tables, forward passes, verification, benchmarks",
    )
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--precision", type=int, choices=[32, 64], default=None)
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument(
        "--parallel", action="store_true", default=None,
        help="attend over height sequences in a worker pool",
    )
    parser.add_argument("--verbose", "-v", action="store_true")

    subparsers = parser.add_subparsers(dest="command", required=True)
    build_table.add_parser(subparsers)
    forward.add_parser(subparsers)
    verify.add_parser(subparsers)
    bench.add_parser(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    try:
        overrides = {
            "seed": args.seed,
            "precision": args.precision,
            "parallel": args.parallel,
            **args.overrides(args),
        }
        config = load_run_config(args.config, overrides)
        logger.debug(f"Running {args.command} with seed {config.seed}")
        return args.handler(args, config)
    except ValidationError as e:
        logger.error(f"Invalid input: {describe_validation_error(e)}")
        return 2
    except VoxelHeightError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
