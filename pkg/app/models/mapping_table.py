from dataclasses import dataclass
from typing import Tuple

import numpy as np

SENTINEL = -1


@dataclass(frozen=True)
class MappingTable:
    """Per-voxel feature-grid coordinate (u, v), or (-1, -1) when the voxel is not visible.

    Entries are laid out by linear index ((x * Y + y) * Z + z).
    """

    dims: Tuple[int, int, int]
    feature_dims: Tuple[int, int]  # (Hf, Wf)
    entries: np.ndarray  # (X*Y*Z, 2) int32, columns (u, v)

    def __post_init__(self):
        x, y, z = self.dims
        if self.entries.shape != (x * y * z, 2):
            raise ValueError(
                f"entries shape {self.entries.shape} does not match dims {self.dims}"
            )
        bad = self.out_of_range()
        if bad.size:
            u, v = self.entries[bad[0]]
            raise ValueError(
                f"entry {int(bad[0])} = ({int(u)}, {int(v)}) is neither the sentinel nor inside "
                f"feature grid {self.feature_dims}"
            )

    def out_of_range(self) -> np.ndarray:
        """Indices of entries that are neither (-1, -1) nor a cell of the feature grid"""
        hf, wf = self.feature_dims
        u, v = self.entries[:, 0], self.entries[:, 1]
        sentinel = (u == SENTINEL) & (v == SENTINEL)
        inside = (u >= 0) & (u < wf) & (v >= 0) & (v < hf)
        return np.flatnonzero(~(sentinel | inside))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def valid_mask(self) -> np.ndarray:
        return self.entries[:, 0] != SENTINEL

    @property
    def valid_fraction(self) -> float:
        if self.size == 0:
            return 0.0
        return float(np.count_nonzero(self.valid_mask)) / self.size

    def linear_index(self, x: int, y: int, z: int) -> int:
        _, ydim, zdim = self.dims
        return (x * ydim + y) * zdim + z

    def entry(self, x: int, y: int, z: int) -> Tuple[int, int]:
        u, v = self.entries[self.linear_index(x, y, z)]
        return int(u), int(v)
