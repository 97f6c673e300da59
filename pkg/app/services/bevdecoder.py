import logging
from typing import Optional, Tuple

import numpy as np

from app.config import BevMode
from app.errors import ShapeError
from app.models import FlopLedger, HeadParams, LedgerSlot, ModelParams, ReducerParams, TensorF
from app.services.tensorcore import matmul, softmax_rows

logger = logging.getLogger(__name__)


def _voxel_rows(vox: TensorF) -> TensorF:
    """(C, X, Y, Z) -> (X*Y*Z, C)"""
    c = vox.shape[0]
    return np.ascontiguousarray(np.moveaxis(vox, 0, -1)).reshape(-1, c)


def predict_height_distribution(
    vox: TensorF, head: HeadParams, ledger: Optional[FlopLedger] = None
) -> TensorF:
    """Per-voxel logit from the linear head, softmax over Z for each (x, y)"""
    if vox.ndim != 4:
        raise ShapeError(f"voxel features must be (C, X, Y, Z), got shape {vox.shape}")
    c, x, y, z = vox.shape
    if head.weight.shape != (c,) or head.bias.shape != (1,):
        raise ShapeError(
            f"height head expects weight ({c},) and bias (1,), got "
            f"{head.weight.shape} and {head.bias.shape}"
        )
    logits = matmul(_voxel_rows(vox), head.weight.reshape(c, 1), ledger, LedgerSlot.OTHER)
    logits = logits + head.bias
    return softmax_rows(logits.reshape(x * y, z)).reshape(x, y, z)


def compress_to_bev(vox: TensorF, dist: TensorF) -> TensorF:
    """BEV[c, x, y] = sum_z dist[x, y, z] * vox[c, x, y, z]"""
    if vox.ndim != 4 or dist.shape != vox.shape[1:]:
        raise ShapeError(
            f"height distribution {dist.shape} does not match voxel grid {vox.shape[1:]}"
        )
    return np.einsum("cxyz,xyz->cxy", vox, dist)


def flatten_reduce(
    vox: TensorF, reducer: ReducerParams, ledger: Optional[FlopLedger] = None
) -> TensorF:
    """Alternative reducer: each column flattened to Z*C, then a linear map to C"""
    c, x, y, z = vox.shape
    if reducer.weight.shape != (z * c, c) or reducer.bias.shape != (c,):
        raise ShapeError(
            f"reducer expects weight ({z * c}, {c}) and bias ({c},), got "
            f"{reducer.weight.shape} and {reducer.bias.shape}"
        )
    # Column vector layout is (z, c), z-major
    columns = np.ascontiguousarray(vox.transpose(1, 2, 3, 0)).reshape(x * y, z * c)
    out = matmul(columns, reducer.weight, ledger, LedgerSlot.OTHER) + reducer.bias
    return np.ascontiguousarray(out.reshape(x, y, c).transpose(2, 0, 1))


def decode_bev(
    vox: TensorF,
    params: ModelParams,
    mode: BevMode = BevMode.WEIGHTED_SUM,
    ledger: Optional[FlopLedger] = None,
) -> Tuple[TensorF, Optional[TensorF]]:
    """Returns (BEV features, height distribution or None for flatten_linear)"""
    if BevMode(mode) is BevMode.FLATTEN_LINEAR:
        if params.reducer is None:
            raise ShapeError("flatten_linear mode needs reducer parameters")
        return flatten_reduce(vox, params.reducer, ledger), None
    dist = predict_height_distribution(vox, params.head, ledger)
    return compress_to_bev(vox, dist), dist
