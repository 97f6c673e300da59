import argparse
import logging
from typing import Any, Dict

import numpy as np

from app.commands.common import output_dir, write_json
from app.config import BevMode, RunConfig
from app.errors import ConfigurationError, ShapeError
from app.models import init_model_params
from app.storage import load_param_bundle, load_table, load_tensor, save_param_bundle, save_tensor, write_manifest
from app.tasks.pipeline import run_forward, synthetic_features

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser(
        "forward", help="view transform, height attention blocks and BEV decoding"
    )
    parser.add_argument("--table", required=True, help="mapping table (.hmap)")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--features", help="image features (.hten), shape (C, Hf, Wf)")
    source.add_argument("--synthetic", action="store_true", help="seeded random features")
    parser.add_argument("--params", default=None, help="parameter bundle directory")
    parser.add_argument(
        "--save-params", action="store_true", help="write the parameters used to <out>/params"
    )
    parser.set_defaults(handler=run, overrides=config_overrides)


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {}


def run(args: argparse.Namespace, config: RunConfig) -> int:
    table = load_table(args.table)
    dtype = config.dtype
    # Independent streams for features and parameters, both derived from the run seed
    feature_seed, param_seed = np.random.SeedSequence(config.seed).spawn(2)

    if args.synthetic:
        features = synthetic_features(feature_seed, config.channels, table.feature_dims, dtype)
    else:
        features = load_tensor(args.features).astype(dtype, copy=False)
    if features.ndim != 3 or features.shape[0] != config.channels:
        raise ShapeError(
            f"view transform: features must be ({config.channels}, Hf, Wf), got {features.shape}"
        )

    if args.params:
        params = load_param_bundle(args.params).astype(dtype)
        if len(params.blocks) != config.blocks:
            raise ConfigurationError(
                f"parameter bundle has {len(params.blocks)} blocks, config expects {config.blocks}"
            )
        if (params.height_embedding is not None) != config.height_embedding:
            state = "has" if params.height_embedding is not None else "lacks"
            raise ConfigurationError(
                f"parameter bundle {state} a height embedding but height_embedding={config.height_embedding}"
            )
    else:
        params = init_model_params(
            param_seed,
            config.channels,
            config.hidden,
            config.blocks,
            table.dims[2],
            with_reducer=config.bev_mode is BevMode.FLATTEN_LINEAR,
            with_height_embedding=config.height_embedding,
            dtype=dtype,
        )

    result = run_forward(table, features, params, config)

    out = output_dir(args)
    artifacts = [
        save_tensor(out / "voxel_refined.hten", result.refined),
        save_tensor(out / "bev.hten", result.bev),
    ]
    if result.height_dist is not None:
        artifacts.append(save_tensor(out / "height_dist.hten", result.height_dist))
    artifacts.append(write_json(out / "ledger.json", result.ledger))
    if args.save_params:
        save_param_bundle(out / "params", params, config.seed)
    write_manifest(out, "forward", config.seed, config.summary(), artifacts)

    logger.info(
        f"Tracked MACs {result.ledger.tracked_macs} "
        f"(predicted {result.ledger.predicted_tracked_macs})"
    )
    print(result.ledger.model_dump_json(indent=2))
    return 0
