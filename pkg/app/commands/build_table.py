import argparse
import logging
from typing import Any, Dict

from app.commands.common import output_dir
from app.config import RunConfig
from app.services.geometry import build_mapping_table, load_calibration, make_voxel_grid
from app.storage import save_table, write_manifest

logger = logging.getLogger(__name__)

TABLE_FILE = "mapping_table.hmap"


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser(
        "build-table", help="project voxel centers and store the mapping table"
    )
    parser.add_argument("calib", help="calibration JSON file")
    parser.add_argument("--stride", type=int, default=None, help="feature map stride")
    parser.add_argument("--preset", choices=["base", "small"], default=None)
    parser.set_defaults(handler=run, overrides=config_overrides)


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {"feature_stride": args.stride, "preset": args.preset}


def run(args: argparse.Namespace, config: RunConfig) -> int:
    calib = load_calibration(args.calib)
    if (calib.image_h, calib.image_w) != (config.image_h, config.image_w):
        logger.warning(
            f"Calibration image dims ({calib.image_h}, {calib.image_w}) differ from config "
            f"({config.image_h}, {config.image_w}); using the calibration's"
        )
    grid = make_voxel_grid(
        config.x_range, config.y_range, config.z_range, config.grid_resolution
    )
    table = build_mapping_table(
        calib, grid, (calib.image_h, calib.image_w), config.feature_stride
    )

    out = output_dir(args)
    path = save_table(out / TABLE_FILE, table)
    write_manifest(out, "build-table", config.seed, config.summary(), [path])

    x, y, z = table.dims
    hf, wf = table.feature_dims
    logger.info(f"Wrote mapping table to {path}")
    print(f"dims={x}x{y}x{z} feature_dims={hf}x{wf} valid_fraction={table.valid_fraction:.6f}")
    return 0
