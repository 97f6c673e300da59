from app.models.tensor import TensorF, Precision, LedgerSlot, FlopLedger
from app.models.mapping_table import MappingTable, SENTINEL
from app.models.params import (
    LayerParams,
    HeadParams,
    ReducerParams,
    ModelParams,
    init_layer_params,
    init_model_params,
)

__all__ = [
    "TensorF",
    "Precision",
    "LedgerSlot",
    "FlopLedger",
    "MappingTable",
    "SENTINEL",
    "LayerParams",
    "HeadParams",
    "ReducerParams",
    "ModelParams",
    "init_layer_params",
    "init_model_params",
]
