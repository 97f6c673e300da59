import json
from pathlib import Path

import numpy as np
import pytest

from app.models import init_layer_params
from app.schemas import CameraCalib

# World x forward, y left, z up -> camera x right, y down, z forward
FRONT_ROTATION = np.array(
    [
        [0.0, -1.0, 0.0],
        [0.0, 0.0, -1.0],
        [1.0, 0.0, 0.0],
    ]
)


def make_calib(fx=10.0, fy=10.0, cx=32.0, cy=32.0, image_h=64, image_w=64, translation=(0.0, 0.0, 0.0)):
    intrinsic = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    extrinsic = np.eye(4)
    extrinsic[:3, :3] = FRONT_ROTATION
    extrinsic[:3, 3] = translation
    return CameraCalib.from_matrices(intrinsic, extrinsic, image_h, image_w)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def calib():
    return make_calib()


@pytest.fixture
def layer_params(rng):
    return init_layer_params(rng, 4, 16)


@pytest.fixture
def calib_file(tmp_path: Path, calib: CameraCalib) -> Path:
    path = tmp_path / "calib.json"
    path.write_text(calib.model_dump_json(), encoding="utf-8")
    return path


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    """Grid (4, 4, 2) at 0.4 m in front of a 64x64 camera, C=8"""
    config = {
        "x_range": [0.4, 2.0],
        "y_range": [-0.8, 0.8],
        "z_range": [0.0, 0.8],
        "preset": "base",
        "image_h": 64,
        "image_w": 64,
        "feature_stride": 16,
        "channels": 8,
        "blocks": 2,
        "verify_sizes": [[2, 2, 2], [2, 2, 4]],
        "bench_sizes": [[4, 4, 4], [8, 8, 4]],
        "bench_channels": 4,
        "chunk_size": 4,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path
