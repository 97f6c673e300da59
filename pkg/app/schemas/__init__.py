from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from typing import Optional, List, Dict, Any, Tuple
import numpy as np


class CameraCalib(BaseModel):
    """Pinhole calibration as stored in the calibration JSON file"""

    model_config = ConfigDict(frozen=True)

    intrinsic: List[float]  # 9 values, row-major
    extrinsic: List[float]  # 16 values, row-major, world -> camera
    image_h: int
    image_w: int

    @field_validator("intrinsic")
    @classmethod
    def _intrinsic_size(cls, v: List[float]) -> List[float]:
        if len(v) != 9:
            raise ValueError("intrinsic must have 9 values")
        return v

    @field_validator("extrinsic")
    @classmethod
    def _extrinsic_size(cls, v: List[float]) -> List[float]:
        if len(v) != 16:
            raise ValueError("extrinsic must have 16 values")
        return v

    @field_validator("image_h", "image_w")
    @classmethod
    def _positive_dims(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("image dimensions must be positive")
        return v

    @model_validator(mode="after")
    def _check_invariants(self) -> "CameraCalib":
        k = self.intrinsic_matrix
        if k[2, 0] != 0.0 or k[2, 1] != 0.0 or k[2, 2] != 1.0:
            raise ValueError("intrinsic bottom row must be (0, 0, 1)")
        t = self.extrinsic_matrix
        if not np.array_equal(t[3], np.array([0.0, 0.0, 0.0, 1.0])):
            raise ValueError("extrinsic bottom row must be (0, 0, 0, 1)")
        r = t[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("extrinsic rotation block is not orthonormal")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(t))):
            raise ValueError("calibration contains non-finite values")
        return self

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)

    @property
    def extrinsic_matrix(self) -> np.ndarray:
        return np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)

    @classmethod
    def from_matrices(
        cls, intrinsic: np.ndarray, extrinsic: np.ndarray, image_h: int, image_w: int
    ) -> "CameraCalib":
        return cls(
            intrinsic=np.asarray(intrinsic, dtype=np.float64).ravel().tolist(),
            extrinsic=np.asarray(extrinsic, dtype=np.float64).ravel().tolist(),
            image_h=image_h,
            image_w=image_w,
        )


class CheckResult(BaseModel):
    name: str
    case: str
    passed: bool
    skipped: bool = False
    max_deviation: Optional[float] = None
    tolerance: Optional[float] = None
    detail: Optional[str] = None


class SuiteSummary(BaseModel):
    suite: str
    seed: int
    passed: bool
    checks: List[CheckResult]

    @property
    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed and not c.skipped]


class BenchRecord(BaseModel):
    size: Tuple[int, int, int]
    tokens: int
    op: str
    macs_predicted: int
    macs_measured: int
    seconds: float


class OperatorCost(BaseModel):
    operator: str
    macs: int


class BenchReport(BaseModel):
    records: List[BenchRecord]
    # op -> {"macs": slope | None, "seconds": slope | None}
    slopes: Dict[str, Dict[str, Optional[float]]]
    partition: Tuple[int, int, int]
    channels: int
    repeats: int
    parallel: bool
    operator_costs: Dict[str, List[OperatorCost]] = {}

    @model_validator(mode="after")
    def _measured_equals_predicted(self) -> "BenchReport":
        for rec in self.records:
            if rec.macs_measured != rec.macs_predicted:
                raise ValueError(
                    f"{rec.op} at {rec.size}: measured {rec.macs_measured} MACs, "
                    f"predicted {rec.macs_predicted}"
                )
        return self


class LedgerSummary(BaseModel):
    qk_macs: int
    sv_macs: int
    other_macs: int
    tracked_macs: int
    predicted_tracked_macs: int
    blocks: int
    partition: Tuple[int, int, int]


class ArtifactManifest(BaseModel):
    command: str
    seed: int
    config: Dict[str, Any]
    artifacts: Dict[str, str]  # file name -> sha256
