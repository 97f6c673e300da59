import json
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigurationError, MissingInputError
from app.models import Precision
from app.services.geometry import make_voxel_grid

# Grid presets: base resolution and the coarser ablation grid
GRID_PRESETS: Dict[str, float] = {
    "base": 0.4,
    "small": 0.8,
}


class BevMode(str, Enum):
    WEIGHTED_SUM = "weighted_sum"
    FLATTEN_LINEAR = "flatten_linear"


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="VOXELHEIGHT_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="forbid",
    )

    # Voxel grid (meters; world frame x forward, y left, z up)
    x_range: Tuple[float, float] = (0.0, 102.4)
    y_range: Tuple[float, float] = (-51.2, 51.2)
    z_range: Tuple[float, float] = (-1.0, 3.0)
    resolution: Optional[float] = None
    preset: str = "base"

    # Image / feature map
    image_h: int = 864
    image_w: int = 1536
    feature_stride: int = 16

    # Height attention
    channels: int = 32
    hidden_ratio: int = 4
    # 0 on an axis means the full extent of that axis
    partition: Tuple[int, int, int] = (1, 1, 0)
    blocks: int = 2
    heads: int = 1
    height_embedding: bool = False
    layer_norm_eps: float = 1e-5

    # BEV decoder
    bev_mode: BevMode = BevMode.WEIGHTED_SUM

    # Execution
    precision: int = 64
    seed: int = 0
    parallel: bool = False
    workers: int = 4
    chunk_size: int = 1024

    # Verification / benchmark
    verify_sizes: List[Tuple[int, int, int]] = [(1, 1, 1), (2, 2, 2), (2, 2, 4), (4, 4, 4)]
    verify_channels: int = 4
    bench_sizes: List[Tuple[int, int, int]] = [
        (4, 4, 4), (8, 8, 4), (16, 16, 4), (32, 32, 4),
    ]
    bench_channels: int = 16
    bench_repeats: int = 3
    bench_precision: int = 32

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v: str) -> str:
        if v not in GRID_PRESETS:
            raise ValueError(f"unknown grid preset {v!r}; choose from {sorted(GRID_PRESETS)}")
        return v

    @field_validator("precision", "bench_precision")
    @classmethod
    def _known_precision(cls, v: int) -> int:
        if v not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        return v

    @field_validator("bench_repeats")
    @classmethod
    def _enough_repeats(cls, v: int) -> int:
        if v < 3:
            raise ValueError("bench_repeats must be at least 3")
        return v

    @field_validator(
        "feature_stride", "channels", "hidden_ratio", "blocks", "heads", "workers",
        "chunk_size", "verify_channels", "bench_channels",
    )
    @classmethod
    def _positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("must be a positive integer")
        return v

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        grid = make_voxel_grid(self.x_range, self.y_range, self.z_range, self.grid_resolution)
        if self.image_h % self.feature_stride or self.image_w % self.feature_stride:
            raise ConfigurationError(
                f"feature_stride {self.feature_stride} does not divide image dims "
                f"({self.image_h}, {self.image_w})"
            )
        if self.channels % self.heads:
            raise ConfigurationError(
                f"heads {self.heads} does not divide channels {self.channels}"
            )
        for axis, size, extent in zip("xyz", self.partition, grid.dims):
            if size < 0:
                raise ConfigurationError(f"partition size on {axis} must be non-negative")
            if size and extent % size:
                raise ConfigurationError(
                    f"partition size {size} does not divide {axis} extent {extent}"
                )
        sizes = list(self.bench_sizes)
        if any(a[0] * a[1] * a[2] > b[0] * b[1] * b[2] for a, b in zip(sizes, sizes[1:])):
            raise ConfigurationError("bench_sizes must be in ascending token count")
        return self

    @property
    def grid_resolution(self) -> float:
        return self.resolution if self.resolution is not None else GRID_PRESETS[self.preset]

    @property
    def hidden(self) -> int:
        return self.channels * self.hidden_ratio

    @property
    def dtype(self):
        return Precision(self.precision).dtype

    def summary(self) -> Dict[str, Any]:
        data = self.model_dump(mode="json")
        data["resolution"] = self.grid_resolution
        return data


@lru_cache
def get_settings() -> RunConfig:
    return RunConfig()


def load_run_config(
    config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Defaults < environment < JSON config file < explicit overrides"""
    if config_path is None and all(v is None for v in (overrides or {}).values()):
        return get_settings()
    data: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise MissingInputError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig(**data)
