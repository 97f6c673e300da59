import threading
from enum import Enum
from typing import Dict

import numpy as np
import numpy.typing as npt

# Dense row-major real array; float64 for verification, float32 for benchmarks
TensorF = npt.NDArray[np.floating]


class Precision(int, Enum):
    SINGLE = 32
    DOUBLE = 64

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.SINGLE else np.float64)

    @property
    def itemsize(self) -> int:
        return self.dtype.itemsize


class LedgerSlot(str, Enum):
    QK = "qk"
    SV = "sv"
    OTHER = "other"


class FlopLedger:
    """Multiply-accumulate counters for the two tracked attention products"""

    def __init__(self):
        self._lock = threading.Lock()
        self.qk_macs = 0
        self.sv_macs = 0
        self.other_macs = 0

    def add(self, slot: LedgerSlot, macs: int) -> None:
        if macs < 0:
            raise ValueError(f"MAC increments must be non-negative, got {macs}")
        slot = LedgerSlot(slot)
        with self._lock:
            if slot is LedgerSlot.QK:
                self.qk_macs += int(macs)
            elif slot is LedgerSlot.SV:
                self.sv_macs += int(macs)
            else:
                self.other_macs += int(macs)

    @property
    def tracked_macs(self) -> int:
        return self.qk_macs + self.sv_macs

    def clear(self) -> None:
        with self._lock:
            self.qk_macs = 0
            self.sv_macs = 0
            self.other_macs = 0

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return {
                "qk_macs": self.qk_macs,
                "sv_macs": self.sv_macs,
                "other_macs": self.other_macs,
            }

    def __repr__(self) -> str:
        return (
            f"FlopLedger(qk_macs={self.qk_macs}, sv_macs={self.sv_macs}, "
            f"other_macs={self.other_macs})"
        )
