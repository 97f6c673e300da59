import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.errors import (
    BehindCameraError,
    CalibrationError,
    ConfigurationError,
    MissingInputError,
    describe_validation_error,
)
from app.models import MappingTable, SENTINEL
from app.schemas import CameraCalib

logger = logging.getLogger(__name__)

# Points at or below this camera-frame depth are treated as behind the camera
MIN_DEPTH = 1e-9
DIVISIBILITY_TOL = 1e-9
MAX_AXIS_CELLS = 1 << 16


@dataclass(frozen=True)
class VoxelGrid:
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    z_range: Tuple[float, float]
    resolution: float
    dims: Tuple[int, int, int]

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def axis_centers(self, axis: int) -> np.ndarray:
        lo = (self.x_range, self.y_range, self.z_range)[axis][0]
        return lo + (np.arange(self.dims[axis], dtype=np.float64) + 0.5) * self.resolution

    def center(self, i: int, j: int, k: int) -> np.ndarray:
        return np.array(
            [
                self.x_range[0] + (i + 0.5) * self.resolution,
                self.y_range[0] + (j + 0.5) * self.resolution,
                self.z_range[0] + (k + 0.5) * self.resolution,
            ]
        )

    def centers(self) -> np.ndarray:
        """All voxel centers as (X*Y*Z, 3), in mapping-table linear index order"""
        gx, gy, gz = np.meshgrid(
            self.axis_centers(0), self.axis_centers(1), self.axis_centers(2), indexing="ij"
        )
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def make_voxel_grid(
    x_range: Sequence[float],
    y_range: Sequence[float],
    z_range: Sequence[float],
    resolution: float,
) -> VoxelGrid:
    if resolution <= 0:
        raise ConfigurationError(f"resolution must be positive, got {resolution}")
    dims = []
    for axis, (lo, hi) in zip("xyz", (x_range, y_range, z_range)):
        span = float(hi) - float(lo)
        if not math.isfinite(span):
            raise ConfigurationError(f"{axis} range [{lo}, {hi}] is not finite")
        if span <= 0:
            raise ConfigurationError(f"{axis} range [{lo}, {hi}] is empty")
        ratio = span / resolution
        if not math.isfinite(ratio) or ratio > MAX_AXIS_CELLS:
            raise ConfigurationError(
                f"{axis} range [{lo}, {hi}] at resolution {resolution} exceeds {MAX_AXIS_CELLS} cells"
            )
        cells = int(round(ratio))
        if cells < 1 or abs(cells * resolution - span) > DIVISIBILITY_TOL:
            raise ConfigurationError(f"{axis} not divisible by resolution {resolution}")
        dims.append(cells)
    return VoxelGrid(
        x_range=(float(x_range[0]), float(x_range[1])),
        y_range=(float(y_range[0]), float(y_range[1])),
        z_range=(float(z_range[0]), float(z_range[1])),
        resolution=float(resolution),
        dims=(dims[0], dims[1], dims[2]),
    )


def project_points(calib: CameraCalib, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project (n, 3) world points to full-resolution pixels.

    Returns (pixels (n, 2), camera-frame depth (n,)). Pixels are only
    meaningful where depth > MIN_DEPTH. Written elementwise so that a single
    point and a batch produce bit-identical results.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ext = calib.extrinsic_matrix
    k = calib.intrinsic_matrix
    px, py, pz = pts[:, 0], pts[:, 1], pts[:, 2]
    cam = [
        ext[r, 0] * px + ext[r, 1] * py + ext[r, 2] * pz + ext[r, 3] for r in range(3)
    ]
    depth = cam[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (k[0, 0] * cam[0] + k[0, 1] * cam[1] + k[0, 2] * cam[2]) / depth
        v = (k[1, 0] * cam[0] + k[1, 1] * cam[1] + k[1, 2] * cam[2]) / depth
    return np.stack([u, v], axis=1), depth


def project_point(calib: CameraCalib, point: Sequence[float]) -> Tuple[float, float]:
    pixels, depth = project_points(calib, np.asarray(point, dtype=np.float64))
    if not depth[0] > MIN_DEPTH:
        raise BehindCameraError(
            f"point {tuple(point)} is behind the camera (depth {depth[0]:.6g})"
        )
    return float(pixels[0, 0]), float(pixels[0, 1])


def build_mapping_table(
    calib: CameraCalib,
    grid: VoxelGrid,
    image_dims: Tuple[int, int],
    feature_stride: int,
) -> MappingTable:
    """Project every voxel center once and store its feature-grid cell.

    Behind-camera and out-of-image voxels get the (-1, -1) sentinel.
    """
    h, w = image_dims
    if feature_stride <= 0 or h % feature_stride or w % feature_stride:
        raise ConfigurationError(
            f"feature_stride {feature_stride} does not divide image dims ({h}, {w})"
        )
    hf, wf = h // feature_stride, w // feature_stride

    pixels, depth = project_points(calib, grid.centers())
    u_px, v_px = pixels[:, 0], pixels[:, 1]
    with np.errstate(invalid="ignore"):
        visible = (
            (depth > MIN_DEPTH)
            & np.isfinite(u_px)
            & np.isfinite(v_px)
            & (u_px >= 0) & (u_px < w)
            & (v_px >= 0) & (v_px < h)
        )

    entries = np.full((grid.num_voxels, 2), SENTINEL, dtype=np.int32)
    u_cell = np.floor(u_px[visible] / feature_stride).astype(np.int64)
    v_cell = np.floor(v_px[visible] / feature_stride).astype(np.int64)
    # Rounding in the division can land exactly on the upper edge
    in_grid = (u_cell < wf) & (v_cell < hf)
    idx = np.flatnonzero(visible)[in_grid]
    entries[idx, 0] = u_cell[in_grid]
    entries[idx, 1] = v_cell[in_grid]

    table = MappingTable(dims=grid.dims, feature_dims=(hf, wf), entries=entries)
    logger.debug(
        f"Mapping table {grid.dims} -> feature grid ({hf}, {wf}): "
        f"{table.valid_fraction:.4f} valid"
    )
    return table


def load_calibration(path: Path) -> CameraCalib:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"calibration file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CalibrationError(f"calibration file {path} is not valid JSON: {e}") from e
    try:
        return CameraCalib(**data)
    except ValidationError as e:
        raise CalibrationError(describe_validation_error(e)) from e
    except TypeError as e:
        raise CalibrationError(f"calibration file {path} must hold a JSON object") from e
