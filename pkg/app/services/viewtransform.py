import logging

import numpy as np

from app.errors import ShapeError
from app.models import MappingTable, TensorF

logger = logging.getLogger(__name__)


def lift_features(img: TensorF, table: MappingTable) -> TensorF:
    """Gather image features (C, Hf, Wf) into voxel features (C, X, Y, Z).

    Each voxel copies the channel vector at its table entry; sentinel voxels
    are exact zeros.
    """
    if img.ndim != 3:
        raise ShapeError(f"image features must be (C, Hf, Wf), got shape {img.shape}")
    c, hf, wf = img.shape
    if (hf, wf) != tuple(table.feature_dims):
        raise ShapeError(
            f"image feature dims {(hf, wf)} do not match table feature dims {table.feature_dims}"
        )
    valid = table.valid_mask
    u = table.entries[valid, 0].astype(np.int64)
    v = table.entries[valid, 1].astype(np.int64)

    flat = img.reshape(c, hf * wf)
    out = np.zeros((c, table.size), dtype=img.dtype)
    out[:, valid] = flat[:, v * wf + u]
    return out.reshape(c, *table.dims)
