import argparse
import json
import logging
from typing import Any, Dict

from app.commands.common import parse_sizes
from app.config import RunConfig
from app.errors import VerificationFailure
from app.services.verify import corrupted_reverse, run_equivalence_suite, run_gradcheck_suite

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser(
        "verify", help="run the equivalence and gradient-check suites"
    )
    parser.add_argument("--sizes", default=None, help="grid sizes, e.g. 2x2x2,2x2x4")
    parser.add_argument(
        "--inject-corrupt",
        action="store_true",
        help="swap in a broken height reverse; the run must fail",
    )
    parser.set_defaults(handler=run, overrides=config_overrides)


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {"verify_sizes": parse_sizes(args.sizes) if args.sizes else None}


def run(args: argparse.Namespace, config: RunConfig) -> int:
    if config.precision != 64:
        logger.warning("Verification always runs in 64-bit; precision setting ignored")
    reverse_fn = corrupted_reverse if args.inject_corrupt else None
    suites = [
        run_equivalence_suite(
            config.seed, config.verify_sizes, config.verify_channels, reverse_fn=reverse_fn
        ),
        run_gradcheck_suite(
            config.seed, config.verify_sizes, config.verify_channels, config.layer_norm_eps
        ),
    ]
    passed = all(s.passed for s in suites)
    payload = {
        "passed": passed,
        "seed": config.seed,
        "suites": [s.model_dump(mode="json") for s in suites],
    }
    print(json.dumps(payload, indent=2, sort_keys=True))

    if not passed:
        for suite in suites:
            for check in suite.failures:
                logger.error(
                    f"{suite.suite}/{check.name} [{check.case}] failed: "
                    f"deviation {check.max_deviation} > {check.tolerance}"
                    + (f" ({check.detail})" if check.detail else "")
                )
        failed = sum(len(s.failures) for s in suites)
        raise VerificationFailure(f"{failed} verification checks failed")
    return 0
