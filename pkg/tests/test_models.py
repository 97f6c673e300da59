from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from app.errors import ShapeError
from app.models import FlopLedger, LedgerSlot, MappingTable, Precision, init_model_params


class TestFlopLedger:
    def test_slots_are_separate(self):
        ledger = FlopLedger()
        ledger.add(LedgerSlot.QK, 3)
        ledger.add(LedgerSlot.SV, 4)
        ledger.add(LedgerSlot.OTHER, 5)
        assert ledger.snapshot() == {"qk_macs": 3, "sv_macs": 4, "other_macs": 5}
        assert ledger.tracked_macs == 7

    def test_concurrent_adds_are_not_lost(self):
        ledger = FlopLedger()
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda _: ledger.add(LedgerSlot.QK, 1), range(2000)))
        assert ledger.qk_macs == 2000

    def test_negative_increment_rejected(self):
        with pytest.raises(ValueError):
            FlopLedger().add(LedgerSlot.SV, -1)

    def test_clear(self):
        ledger = FlopLedger()
        ledger.add("qk", 10)
        ledger.clear()
        assert ledger.tracked_macs == 0


def test_precision_dtypes():
    assert Precision(32).dtype == np.float32
    assert Precision(64).itemsize == 8


def test_mapping_table_rejects_wrong_entry_count():
    with pytest.raises(ValueError):
        MappingTable(dims=(2, 2, 2), feature_dims=(1, 1), entries=np.zeros((7, 2), dtype=np.int32))


class TestParams:
    def test_seeded_init_is_reproducible(self):
        a = init_model_params(4, 8, 32, 2, 4, with_reducer=True)
        b = init_model_params(4, 8, 32, 2, 4, with_reducer=True)
        for name, arr in a.named_arrays().items():
            assert np.array_equal(arr, b.named_arrays()[name])

    def test_shapes(self):
        params = init_model_params(0, 8, 32, 2, 4, with_reducer=True, with_height_embedding=True)
        block = params.blocks[0]
        assert block.wq.shape == (8, 8)
        assert block.w1.shape == (8, 32)
        assert block.w2.shape == (32, 8)
        assert params.reducer.weight.shape == (32, 8)
        assert params.height_embedding.shape == (4, 8)

    def test_validate_catches_bad_shapes(self):
        block = init_model_params(0, 4, 16, 1, 2).blocks[0]
        block.bq = np.zeros(3)
        with pytest.raises(ShapeError):
            block.validate()

    def test_astype(self):
        params = init_model_params(0, 4, 16, 1, 2).astype(np.float32)
        assert all(arr.dtype == np.float32 for arr in params.named_arrays().values())
