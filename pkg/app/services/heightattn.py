"""Height Partition / Height Reverse, attention within height sequences, and
the pre-norm transformer block that refines voxel features.

Voxel features are (C, X, Y, Z); height sequences are (N, S, C) with groups in
lexicographic (block_x, block_y, block_z) order and tokens in lexicographic
(dx, dy, dz) order, dz fastest.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import PartitionError, ShapeError
from app.models import FlopLedger, LayerParams, LedgerSlot, TensorF
from app.services.tensorcore import (
    layer_norm,
    layer_norm_backward,
    linear,
    matmul,
    mlp_backward,
    mlp_forward,
    softmax_rows,
    softmax_rows_backward,
)

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]


@dataclass(frozen=True)
class PartitionSpec:
    """Size (X_h, Y_h, Z_h) of one local height sequence"""

    xh: int
    yh: int
    zh: int

    @classmethod
    def column(cls, height: int) -> "PartitionSpec":
        return cls(1, 1, height)

    @classmethod
    def resolve(cls, sizes: Sequence[int], dims: Dims) -> "PartitionSpec":
        """Build a spec where a size of 0 stands for the full axis extent"""
        return cls(*(extent if size == 0 else size for size, extent in zip(sizes, dims)))

    def as_tuple(self) -> Dims:
        return (self.xh, self.yh, self.zh)

    @property
    def sequence_length(self) -> int:
        return self.xh * self.yh * self.zh

    def validate(self, dims: Dims) -> None:
        for axis, size, extent in zip("xyz", self.as_tuple(), dims):
            if size < 1:
                raise PartitionError(f"partition size on {axis} must be >= 1, got {size}")
            if extent % size:
                raise PartitionError(
                    f"partition size {size} does not divide {axis} extent {extent}"
                )

    def num_sequences(self, dims: Dims) -> int:
        self.validate(dims)
        x, y, z = dims
        return (x // self.xh) * (y // self.yh) * (z // self.zh)


def divisor_specs(dims: Dims) -> List[PartitionSpec]:
    """Every spec whose sizes divide the grid dims"""

    def divisors(n: int) -> List[int]:
        return [d for d in range(1, n + 1) if n % d == 0]

    x, y, z = dims
    return [
        PartitionSpec(a, b, c) for a in divisors(x) for b in divisors(y) for c in divisors(z)
    ]


def height_partition(vox: TensorF, spec: PartitionSpec) -> TensorF:
    if vox.ndim != 4:
        raise PartitionError(f"voxel features must be (C, X, Y, Z), got shape {vox.shape}")
    c, x, y, z = vox.shape
    spec.validate((x, y, z))
    xh, yh, zh = spec.as_tuple()
    blocks = vox.reshape(c, x // xh, xh, y // yh, yh, z // zh, zh)
    # -> (bx, by, bz, dx, dy, dz, C)
    blocks = blocks.transpose(1, 3, 5, 2, 4, 6, 0)
    return np.ascontiguousarray(blocks).reshape(spec.num_sequences((x, y, z)), xh * yh * zh, c)


def height_reverse(seq: TensorF, spec: PartitionSpec, dims: Dims) -> TensorF:
    x, y, z = dims
    spec.validate(dims)
    if seq.ndim != 3:
        raise PartitionError(f"height sequences must be (N, S, C), got shape {seq.shape}")
    n, s, c = seq.shape
    if n != spec.num_sequences(dims) or s != spec.sequence_length:
        raise PartitionError(
            f"sequence tensor {seq.shape} is inconsistent with spec {spec.as_tuple()} "
            f"on grid {dims}"
        )
    xh, yh, zh = spec.as_tuple()
    blocks = seq.reshape(x // xh, y // yh, z // zh, xh, yh, zh, c)
    # -> (C, bx, dx, by, dy, bz, dz)
    blocks = blocks.transpose(6, 0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(blocks).reshape(c, x, y, z)


def _split_heads(t: TensorF, heads: int) -> TensorF:
    *lead, s, c = t.shape
    return np.moveaxis(t.reshape(*lead, s, heads, c // heads), -2, -3)


def _merge_heads(t: TensorF) -> TensorF:
    *lead, h, s, d = t.shape
    return np.moveaxis(t, -3, -2).reshape(*lead, s, h * d)


def _check_heads(channels: int, heads: int) -> None:
    if heads < 1 or channels % heads:
        raise ShapeError(f"heads {heads} must divide channels {channels}")


def vanilla_attention(
    tokens: TensorF,
    params: LayerParams,
    ledger: Optional[FlopLedger] = None,
    heads: int = 1,
) -> TensorF:
    """softmax(Q K^T / sqrt(d_k)) V over the token axis.

    Accepts (n, C) or a batch of sequences (N, S, C). Q/K/V projections count as
    other_macs; the two tracked products add n^2 * C to qk and sv.
    """
    if tokens.ndim < 2 or tokens.shape[-2] < 1:
        raise ShapeError(f"attention needs at least one token, got shape {tokens.shape}")
    if tokens.shape[-1] != params.channels:
        raise ShapeError(
            f"tokens have {tokens.shape[-1]} channels, parameters expect {params.channels}"
        )
    _check_heads(params.channels, heads)
    q = _split_heads(linear(tokens, params.wq, params.bq, ledger), heads)
    k = _split_heads(linear(tokens, params.wk, params.bk, ledger), heads)
    v = _split_heads(linear(tokens, params.wv, params.bv, ledger), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, np.swapaxes(k, -1, -2), ledger, LedgerSlot.QK) * scale
    probs = softmax_rows(scores)
    return _merge_heads(matmul(probs, v, ledger, LedgerSlot.SV))


def attention_backward(
    tokens: TensorF, params: LayerParams, d_out: TensorF, heads: int = 1
) -> TensorF:
    """Gradient of <d_out, vanilla_attention(tokens)> with respect to tokens"""
    q = _split_heads(linear(tokens, params.wq, params.bq), heads)
    k = _split_heads(linear(tokens, params.wk, params.bk), heads)
    v = _split_heads(linear(tokens, params.wv, params.bv), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    probs = softmax_rows((q @ np.swapaxes(k, -1, -2)) * scale)

    d_o = _split_heads(d_out, heads)
    d_probs = d_o @ np.swapaxes(v, -1, -2)
    d_v = np.swapaxes(probs, -1, -2) @ d_o
    d_scores = softmax_rows_backward(probs, d_probs) * scale
    d_q = d_scores @ k
    d_k = np.swapaxes(d_scores, -1, -2) @ q

    return (
        _merge_heads(d_q) @ params.wq.T
        + _merge_heads(d_k) @ params.wk.T
        + _merge_heads(d_v) @ params.wv.T
    )


def map_sequences(
    fn: Callable[[TensorF], TensorF],
    seq: TensorF,
    parallel: bool = False,
    workers: int = 4,
    chunk_size: int = 1024,
) -> TensorF:
    """Apply fn to fixed-size chunks of sequences, serially or on a thread pool.

    Chunk boundaries depend only on chunk_size, so both modes run the same
    kernel calls on the same data.
    """
    n = seq.shape[0]
    chunks = [seq[i:i + chunk_size] for i in range(0, n, chunk_size)]
    if parallel and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, chunks))
    else:
        results = [fn(chunk) for chunk in chunks]
    return np.concatenate(results, axis=0) if len(results) > 1 else results[0]


def height_attention(
    vox: TensorF,
    spec: PartitionSpec,
    params: LayerParams,
    ledger: Optional[FlopLedger] = None,
    heads: int = 1,
    parallel: bool = False,
    workers: int = 4,
    chunk_size: int = 1024,
) -> TensorF:
    """Partition, attend within each height sequence with shared params, reverse"""
    dims = tuple(vox.shape[1:])
    seq = height_partition(vox, spec)
    out = map_sequences(
        lambda chunk: vanilla_attention(chunk, params, ledger, heads),
        seq,
        parallel=parallel,
        workers=workers,
        chunk_size=chunk_size,
    )
    return height_reverse(out, spec, dims)


def _block_forward(
    x: TensorF, params: LayerParams, ledger: Optional[FlopLedger], heads: int, eps: float
) -> TensorF:
    attn = vanilla_attention(layer_norm(x, params.ln1_gain, params.ln1_bias, eps), params, ledger, heads)
    x1 = x + linear(attn, params.wo, params.bo, ledger)
    return x1 + mlp_forward(layer_norm(x1, params.ln2_gain, params.ln2_bias, eps), params, ledger)


def transformer_block(
    seq: TensorF,
    params: LayerParams,
    ledger: Optional[FlopLedger] = None,
    heads: int = 1,
    eps: float = 1e-5,
    parallel: bool = False,
    workers: int = 4,
    chunk_size: int = 1024,
) -> TensorF:
    """L' = HA(Norm(L)) + L;  L'' = MLP(Norm(L')) + L'"""
    if seq.ndim != 3 or seq.shape[-1] != params.channels:
        raise ShapeError(
            f"transformer block expects (N, S, {params.channels}), got shape {seq.shape}"
        )
    return map_sequences(
        lambda chunk: _block_forward(chunk, params, ledger, heads, eps),
        seq,
        parallel=parallel,
        workers=workers,
        chunk_size=chunk_size,
    )


def transformer_block_backward(
    seq: TensorF, params: LayerParams, d_out: TensorF, heads: int = 1, eps: float = 1e-5
) -> TensorF:
    """Gradient of <d_out, transformer_block(seq)> with respect to seq"""
    n1 = layer_norm(seq, params.ln1_gain, params.ln1_bias, eps)
    attn = vanilla_attention(n1, params, None, heads)
    x1 = seq + linear(attn, params.wo, params.bo)
    n2 = layer_norm(x1, params.ln2_gain, params.ln2_bias, eps)

    d_x1 = d_out + layer_norm_backward(x1, params.ln2_gain, mlp_backward(n2, params, d_out), eps)
    d_attn = d_x1 @ params.wo.T
    d_n1 = attention_backward(n1, params, d_attn, heads)
    return d_x1 + layer_norm_backward(seq, params.ln1_gain, d_n1, eps)


def add_height_embedding(vox: TensorF, embedding: TensorF) -> TensorF:
    """Add one learned C-vector per z index"""
    c, _, _, z = vox.shape
    if embedding.shape != (z, c):
        raise ShapeError(f"height embedding must be ({z}, {c}), got {embedding.shape}")
    return vox + embedding.T[:, None, None, :]


def refine_voxels(
    vox: TensorF,
    spec: PartitionSpec,
    blocks: Sequence[LayerParams],
    ledger: Optional[FlopLedger] = None,
    heads: int = 1,
    eps: float = 1e-5,
    height_embedding: Optional[TensorF] = None,
    parallel: bool = False,
    workers: int = 4,
    chunk_size: int = 1024,
) -> TensorF:
    """Height Partition once, run the stacked blocks, Height Reverse"""
    dims = tuple(vox.shape[1:])
    if height_embedding is not None:
        vox = add_height_embedding(vox, height_embedding)
    seq = height_partition(vox, spec)
    for i, params in enumerate(blocks):
        seq = transformer_block(
            seq, params, ledger, heads, eps,
            parallel=parallel, workers=workers, chunk_size=chunk_size,
        )
        logger.debug(f"Block {i}: {seq.shape[0]} sequences of length {seq.shape[1]}")
    return height_reverse(seq, spec, dims)


def window_spec(dims: Dims, window: int = 4) -> PartitionSpec:
    """BEV window of up to window x window columns, one height slice per sequence"""
    x, y, _ = dims
    w = math.gcd(math.gcd(x, y), window)
    return PartitionSpec(w, w, 1)


def conv3d(
    vox: TensorF, weight: TensorF, bias: TensorF, ledger: Optional[FlopLedger] = None
) -> TensorF:
    """Zero-padded C -> C 3D cross-correlation with an odd cubic kernel.

    weight is (k, k, k, C_in, C_out); every kernel offset is one (XYZ, C) x (C, C)
    product counted as other_macs.
    """
    if vox.ndim != 4:
        raise ShapeError(f"voxel features must be (C, X, Y, Z), got shape {vox.shape}")
    c, x, y, z = vox.shape
    k = weight.shape[0]
    if k % 2 == 0 or weight.shape != (k, k, k, c, c) or bias.shape != (c,):
        raise ShapeError(
            f"conv3d expects weight (k, k, k, {c}, {c}) with odd k and bias ({c},), got "
            f"{weight.shape} and {bias.shape}"
        )
    pad = k // 2
    padded = np.pad(vox, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    out = np.zeros((x * y * z, c), dtype=np.result_type(vox, weight))
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                window = padded[:, dx:dx + x, dy:dy + y, dz:dz + z].reshape(c, -1).T
                out += matmul(np.ascontiguousarray(window), weight[dx, dy, dz], ledger, LedgerSlot.OTHER)
    return np.ascontiguousarray((out + bias).T).reshape(c, x, y, z)


def complexity_vanilla(dims: Dims, channels: int) -> int:
    """2 (XYZ)^2 C"""
    x, y, z = dims
    tokens = x * y * z
    return 2 * tokens * tokens * channels


def complexity_height(dims: Dims, spec: PartitionSpec, channels: int) -> int:
    """2 X X_h Y Y_h Z Z_h C"""
    spec.validate(dims)
    x, y, z = dims
    return 2 * x * spec.xh * y * spec.yh * z * spec.zh * channels


def complexity_conv3d(dims: Dims, channels: int, kernel: int = 3) -> int:
    """Same-padded C -> C 3D convolution: X Y Z k^3 C^2"""
    x, y, z = dims
    return x * y * z * kernel ** 3 * channels * channels


def operator_complexities(
    dims: Dims, spec: PartitionSpec, channels: int, window: int = 4, kernel: int = 3
) -> Dict[str, int]:
    """MACs of the voxel operators compared against height attention"""
    return {
        "vanilla_attention": complexity_vanilla(dims, channels),
        "height_attention": complexity_height(dims, spec, channels),
        "bev_window_attention": complexity_height(dims, window_spec(dims, window), channels),
        "conv3d": complexity_conv3d(dims, channels, kernel),
    }
