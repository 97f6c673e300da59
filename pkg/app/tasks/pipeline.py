import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.config import BevMode, RunConfig
from app.errors import ShapeError
from app.models import FlopLedger, MappingTable, ModelParams, TensorF
from app.schemas import LedgerSummary
from app.services.bevdecoder import decode_bev
from app.services.heightattn import PartitionSpec, complexity_height, refine_voxels
from app.services.viewtransform import lift_features

logger = logging.getLogger(__name__)


@dataclass
class ForwardResult:
    voxels: TensorF
    refined: TensorF
    bev: TensorF
    height_dist: Optional[TensorF]
    ledger: LedgerSummary


def synthetic_features(seed, channels: int, feature_dims, dtype=np.float64) -> TensorF:
    """Seeded standard-normal image features (numpy default_rng, PCG64)"""
    rng = np.random.default_rng(seed)
    hf, wf = feature_dims
    return rng.standard_normal((channels, hf, wf)).astype(dtype)


def run_forward(
    table: MappingTable,
    features: TensorF,
    params: ModelParams,
    config: RunConfig,
    ledger: Optional[FlopLedger] = None,
) -> ForwardResult:
    """View transform -> height attention blocks -> height distribution -> BEV"""
    ledger = ledger or FlopLedger()
    dims = tuple(table.dims)

    # Stage 1: view transform
    try:
        voxels = lift_features(features, table)
    except ShapeError as e:
        raise ShapeError(f"view transform: {e.detail}") from e
    visible = table.valid_fraction
    logger.info(f"[view transform] lifted {features.shape} into voxels {voxels.shape} ({visible:.2%} visible)")

    # Stage 2: height attention
    spec = PartitionSpec.resolve(config.partition, dims)
    try:
        refined = refine_voxels(
            voxels,
            spec,
            params.blocks,
            ledger,
            heads=config.heads,
            eps=config.layer_norm_eps,
            height_embedding=params.height_embedding if config.height_embedding else None,
            parallel=config.parallel,
            workers=config.workers,
            chunk_size=config.chunk_size,
        )
    except ShapeError as e:
        raise ShapeError(f"height attention: {e.detail}") from e
    logger.info(
        f"[height attention] {len(params.blocks)} blocks over spec {spec.as_tuple()}, "
        f"{ledger.tracked_macs} tracked MACs"
    )

    # Stage 3: BEV decoder
    try:
        bev, dist = decode_bev(refined, params, BevMode(config.bev_mode), ledger)
    except ShapeError as e:
        raise ShapeError(f"bev decoder: {e.detail}") from e
    logger.info(f"[bev decoder] {config.bev_mode.value} -> BEV {bev.shape}")

    summary = ledger.snapshot()
    ledger_summary = LedgerSummary(
        **summary,
        tracked_macs=summary["qk_macs"] + summary["sv_macs"],
        predicted_tracked_macs=len(params.blocks) * complexity_height(dims, spec, voxels.shape[0]),
        blocks=len(params.blocks),
        partition=spec.as_tuple(),
    )
    return ForwardResult(
        voxels=voxels, refined=refined, bev=bev, height_dist=dist, ledger=ledger_summary
    )
