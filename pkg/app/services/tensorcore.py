"""Dense kernels on row-major numpy arrays.

Every forward kernel checks its output for non-finite values. Matrix products
go through ``matmul`` so that their multiply-accumulates land in a FlopLedger.
"""
import logging
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from app.errors import NumericalError, OracleError, ShapeError
from app.models import FlopLedger, LayerParams, LedgerSlot, TensorF

logger = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _ensure_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{op} produced non-finite values")
    return x


def matmul(
    a: TensorF,
    b: TensorF,
    ledger: Optional[FlopLedger] = None,
    slot: LedgerSlot = LedgerSlot.OTHER,
) -> TensorF:
    """(..., m, k) @ (..., k, n); adds batch * m * n * k MACs to the chosen slot"""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    if ledger is not None:
        m, k = a.shape[-2], a.shape[-1]
        n = b.shape[-1]
        batch = int(np.prod(out.shape[:-2], dtype=np.int64))
        ledger.add(slot, batch * m * n * k)
    return _ensure_finite(out, "matmul")


def linear(
    x: TensorF, weight: TensorF, bias: TensorF, ledger: Optional[FlopLedger] = None
) -> TensorF:
    """x @ weight + bias over the last axis; counted as other_macs"""
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"linear shape mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    lead = x.shape[:-1]
    out = matmul(x.reshape(-1, x.shape[-1]), weight, ledger, LedgerSlot.OTHER) + bias
    return out.reshape(*lead, weight.shape[1])


def softmax_rows(a: TensorF) -> TensorF:
    """Softmax over the last axis with the row max subtracted first"""
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return _ensure_finite(e / np.sum(e, axis=-1, keepdims=True), "softmax_rows")


def softmax_rows_backward(probs: TensorF, d_probs: TensorF) -> TensorF:
    return probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True))


def layer_norm(x: TensorF, gain: TensorF, bias: TensorF, eps: float = 1e-5) -> TensorF:
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm expects gain/bias of length {c}")
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    out = centered / np.sqrt(var + eps) * gain + bias
    return _ensure_finite(out, "layer_norm")


def layer_norm_backward(
    x: TensorF, gain: TensorF, d_out: TensorF, eps: float = 1e-5
) -> TensorF:
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    d_hat = d_out * gain
    return inv_std * (
        d_hat
        - np.mean(d_hat, axis=-1, keepdims=True)
        - x_hat * np.mean(d_hat * x_hat, axis=-1, keepdims=True)
    )


def gelu(x: TensorF) -> TensorF:
    """Exact GELU: x * Phi(x)"""
    return x * ndtr(x)


def gelu_grad(x: TensorF) -> TensorF:
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def mlp_forward(x: TensorF, params: LayerParams, ledger: Optional[FlopLedger] = None) -> TensorF:
    hidden = linear(x, params.w1, params.b1, ledger)
    return _ensure_finite(linear(gelu(hidden), params.w2, params.b2, ledger), "mlp_forward")


def mlp_backward(x: TensorF, params: LayerParams, d_out: TensorF) -> TensorF:
    hidden = linear(x, params.w1, params.b1)
    d_act = d_out @ params.w2.T
    return (d_act * gelu_grad(hidden)) @ params.w1.T


def finite_diff_grad(f: Callable[[TensorF], float], x: TensorF, h: float = 1e-5) -> TensorF:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, one element at a time"""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    if x.dtype != np.float64:
        raise OracleError(f"finite differences require float64 input, got {x.dtype}")
    shifted = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(shifted)
    flat = shifted.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(shifted))
        flat[i] = orig - h
        f_minus = float(f(shifted))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise OracleError(f"objective is not finite near element {i}")
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: TensorF, numeric: TensorF) -> float:
    """max over elements of |a - f| / max(1, |a|, |f|)"""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0
