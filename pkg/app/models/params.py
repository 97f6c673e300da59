from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Union

import numpy as np

from app.errors import ShapeError


@dataclass
class LayerParams:
    """Weights of one pre-norm transformer block.

    Linear weights are stored (in_features, out_features) so that a layer is
    ``x @ w + b`` on row-major tokens.
    """

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    @property
    def channels(self) -> int:
        return int(self.wq.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[1])

    def validate(self) -> None:
        c, hid = self.channels, self.hidden
        expected = {
            "wq": (c, c), "wk": (c, c), "wv": (c, c), "wo": (c, c),
            "bq": (c,), "bk": (c,), "bv": (c,), "bo": (c,),
            "w1": (c, hid), "b1": (hid,), "w2": (hid, c), "b2": (c,),
            "ln1_gain": (c,), "ln1_bias": (c,), "ln2_gain": (c,), "ln2_bias": (c,),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"layer parameter {name} has shape {actual}, expected {shape}")

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(**{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)})

    def without_residual_branches(self) -> "LayerParams":
        """Copy with the attention output projection and MLP second layer zeroed"""
        return replace(
            self,
            wo=np.zeros_like(self.wo),
            bo=np.zeros_like(self.bo),
            w2=np.zeros_like(self.w2),
            b2=np.zeros_like(self.b2),
        )


@dataclass
class HeadParams:
    """Linear C -> 1 height-logit head"""

    weight: np.ndarray  # (C,)
    bias: np.ndarray  # (1,)


@dataclass
class ReducerParams:
    """Linear Z*C -> C reducer for the flatten_linear BEV mode"""

    weight: np.ndarray  # (Z*C, C)
    bias: np.ndarray  # (C,)


@dataclass
class ModelParams:
    blocks: List[LayerParams]
    head: HeadParams
    reducer: Optional[ReducerParams] = None
    height_embedding: Optional[np.ndarray] = None  # (Z, C)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            for f in fields(block):
                arrays[f"blocks.{i}.{f.name}"] = getattr(block, f.name)
        arrays["head.weight"] = self.head.weight
        arrays["head.bias"] = self.head.bias
        if self.reducer is not None:
            arrays["reducer.weight"] = self.reducer.weight
            arrays["reducer.bias"] = self.reducer.bias
        if self.height_embedding is not None:
            arrays["height_embedding"] = self.height_embedding
        return arrays

    @classmethod
    def from_named_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        block_ids = sorted({int(k.split(".")[1]) for k in arrays if k.startswith("blocks.")})
        blocks = []
        for i in block_ids:
            kwargs = {f.name: arrays[f"blocks.{i}.{f.name}"] for f in fields(LayerParams)}
            block = LayerParams(**kwargs)
            block.validate()
            blocks.append(block)
        head = HeadParams(weight=arrays["head.weight"], bias=arrays["head.bias"])
        reducer = None
        if "reducer.weight" in arrays:
            reducer = ReducerParams(weight=arrays["reducer.weight"], bias=arrays["reducer.bias"])
        return cls(
            blocks=blocks,
            head=head,
            reducer=reducer,
            height_embedding=arrays.get("height_embedding"),
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_named_arrays(
            {name: arr.astype(dtype) for name, arr in self.named_arrays().items()}
        )


def _linear_weight(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)


def init_layer_params(
    rng: np.random.Generator, channels: int, hidden: int, dtype=np.float64
) -> LayerParams:
    """Draw one block's parameters from the generator in a fixed order"""
    c = channels
    return LayerParams(
        wq=_linear_weight(rng, c, c, dtype),
        bq=(0.1 * rng.standard_normal(c)).astype(dtype),
        wk=_linear_weight(rng, c, c, dtype),
        bk=(0.1 * rng.standard_normal(c)).astype(dtype),
        wv=_linear_weight(rng, c, c, dtype),
        bv=(0.1 * rng.standard_normal(c)).astype(dtype),
        wo=_linear_weight(rng, c, c, dtype),
        bo=(0.1 * rng.standard_normal(c)).astype(dtype),
        w1=_linear_weight(rng, c, hidden, dtype),
        b1=(0.1 * rng.standard_normal(hidden)).astype(dtype),
        w2=_linear_weight(rng, hidden, c, dtype),
        b2=(0.1 * rng.standard_normal(c)).astype(dtype),
        ln1_gain=(1.0 + 0.1 * rng.standard_normal(c)).astype(dtype),
        ln1_bias=(0.1 * rng.standard_normal(c)).astype(dtype),
        ln2_gain=(1.0 + 0.1 * rng.standard_normal(c)).astype(dtype),
        ln2_bias=(0.1 * rng.standard_normal(c)).astype(dtype),
    )


def init_model_params(
    seed: Union[int, np.random.SeedSequence],
    channels: int,
    hidden: int,
    blocks: int,
    height: int,
    with_reducer: bool = False,
    with_height_embedding: bool = False,
    dtype=np.float64,
) -> ModelParams:
    """Seeded initialisation (PCG64 via numpy.random.default_rng)"""
    rng = np.random.default_rng(seed)
    layer_params = [init_layer_params(rng, channels, hidden, dtype) for _ in range(blocks)]
    head = HeadParams(
        weight=(rng.standard_normal(channels) / np.sqrt(channels)).astype(dtype),
        bias=np.zeros(1, dtype=dtype),
    )
    reducer = None
    if with_reducer:
        reducer = ReducerParams(
            weight=_linear_weight(rng, height * channels, channels, dtype),
            bias=np.zeros(channels, dtype=dtype),
        )
    embedding = None
    if with_height_embedding:
        embedding = (0.02 * rng.standard_normal((height, channels))).astype(dtype)
    return ModelParams(
        blocks=layer_params, head=head, reducer=reducer, height_embedding=embedding
    )
