"""Oracle equivalence, gradient checks, and the attention scaling benchmark."""
import logging
import math
import statistics
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ConfigurationError
from app.models import FlopLedger, LayerParams, init_layer_params
from app.schemas import BenchRecord, BenchReport, CheckResult, OperatorCost, SuiteSummary
from app.services.heightattn import (
    PartitionSpec,
    attention_backward,
    complexity_conv3d,
    complexity_height,
    complexity_vanilla,
    conv3d,
    divisor_specs,
    height_attention,
    height_partition,
    height_reverse,
    operator_complexities,
    transformer_block,
    transformer_block_backward,
    vanilla_attention,
    window_spec,
)
from app.services.tensorcore import (
    finite_diff_grad,
    layer_norm,
    layer_norm_backward,
    mlp_backward,
    mlp_forward,
    relative_error,
    softmax_rows,
    softmax_rows_backward,
)

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]
ReverseFn = Callable[[np.ndarray, PartitionSpec, Dims], np.ndarray]

ALGEBRAIC_TOL = 1e-12
MODE_CROSSED_TOL = 1e-6
GRADIENT_TOL = 1e-4
FD_STEP = 1e-5
MAX_ORACLE_TOKENS = 512
# Per-vector variance below this makes layer-norm gradients ill-conditioned
SINGULAR_VARIANCE = 1e-12


def _case(dims: Dims, channels: int) -> str:
    return f"grid={dims[0]}x{dims[1]}x{dims[2]} C={channels}"


def _max_dev(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _tolerance_check(name: str, case: str, deviation: float, tol: float) -> CheckResult:
    return CheckResult(
        name=name, case=case, passed=deviation <= tol, max_deviation=deviation, tolerance=tol
    )


def corrupted_reverse(seq: np.ndarray, spec: PartitionSpec, dims: Dims) -> np.ndarray:
    """Negative-control fixture: reverses token order inside every sequence"""
    return height_reverse(np.ascontiguousarray(seq[:, ::-1, :]), spec, dims)


def brute_force_attention(tokens: np.ndarray, params: LayerParams) -> np.ndarray:
    """Straight-line evaluation of softmax(Q K^T / sqrt(C)) V with Python floats"""
    n, c = tokens.shape
    rows = tokens.tolist()
    wq, wk, wv = params.wq.tolist(), params.wk.tolist(), params.wv.tolist()
    bq, bk, bv = params.bq.tolist(), params.bk.tolist(), params.bv.tolist()

    def project(row, w, b):
        return [b[j] + sum(row[i] * w[i][j] for i in range(c)) for j in range(c)]

    q = [project(r, wq, bq) for r in rows]
    k = [project(r, wk, bk) for r in rows]
    v = [project(r, wv, bv) for r in rows]
    scale = 1.0 / math.sqrt(c)
    out = []
    for i in range(n):
        logits = [sum(q[i][d] * k[j][d] for d in range(c)) * scale for j in range(n)]
        peak = max(logits)
        weights = [math.exp(s - peak) for s in logits]
        total = sum(weights)
        out.append([sum(weights[j] * v[j][d] for j in range(n)) / total for d in range(c)])
    return np.array(out, dtype=np.float64)


def _check_sizes(sizes: Sequence[Dims]) -> List[Dims]:
    checked = []
    for size in sizes:
        dims = tuple(int(s) for s in size)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigurationError(f"invalid grid size {size}")
        if dims[0] * dims[1] * dims[2] > MAX_ORACLE_TOKENS:
            raise ConfigurationError(
                f"grid {dims} has more than {MAX_ORACLE_TOKENS} tokens; too large for oracle checks"
            )
        checked.append(dims)
    return checked


def run_equivalence_suite(
    seed: int,
    sizes: Sequence[Dims],
    channels: int = 4,
    reverse_fn: Optional[ReverseFn] = None,
) -> SuiteSummary:
    """Global-group and per-column oracle equivalence, partition bijection, ledger agreement"""
    reverse = reverse_fn or height_reverse
    rng = np.random.default_rng(seed)
    checks: List[CheckResult] = []

    for dims in _check_sizes(sizes):
        case = _case(dims, channels)
        x, y, z = dims
        params = init_layer_params(rng, channels, 4 * channels)
        vox = rng.standard_normal((channels, x, y, z))

        # Global group coincides with vanilla attention on flattened tokens
        ledger = FlopLedger()
        global_spec = PartitionSpec(x, y, z)
        grouped = height_attention(vox, global_spec, params, ledger)
        flat_ledger = FlopLedger()
        flat = vanilla_attention(vox.reshape(channels, -1).T, params, flat_ledger)
        flat = flat.T.reshape(channels, x, y, z)
        checks.append(_tolerance_check("global_group_equivalence", case, _max_dev(grouped, flat), ALGEBRAIC_TOL))
        checks.append(_tolerance_check(
            "vanilla_ledger_formula", case,
            float(abs(flat_ledger.tracked_macs - complexity_vanilla(dims, channels))), 0.0,
        ))

        # Per-column attention against the straight-line oracle
        column = PartitionSpec.column(z)
        ledger = FlopLedger()
        out = height_attention(vox, column, params, ledger)
        deviation = 0.0
        for i in range(x):
            for j in range(y):
                expected = brute_force_attention(vox[:, i, j, :].T, params)
                deviation = max(deviation, _max_dev(out[:, i, j, :].T, expected))
        checks.append(_tolerance_check("column_oracle_equivalence", case, deviation, ALGEBRAIC_TOL))
        checks.append(_tolerance_check(
            "height_ledger_formula", case,
            float(abs(ledger.tracked_macs - complexity_height(dims, column, channels))), 0.0,
        ))

        # Perturbing one column leaves every other column bit-identical
        nudged = vox.copy()
        nudged[:, 0, 0, :] += rng.standard_normal((channels, z))
        moved = height_attention(nudged, column, params) - out
        moved[:, 0, 0, :] = 0.0
        checks.append(_tolerance_check("column_locality", case, float(np.max(np.abs(moved))), 0.0))

        # Permutation equivariance within one sequence
        seq = height_partition(vox, column)
        perm = rng.permutation(seq.shape[1])
        base = vanilla_attention(seq, params)
        permuted = vanilla_attention(np.ascontiguousarray(seq[:, perm, :]), params)
        checks.append(_tolerance_check(
            "permutation_equivariance", case, _max_dev(base[:, perm, :], permuted), ALGEBRAIC_TOL,
        ))

        # 32-bit run against the 64-bit run on the same float32-representable inputs
        vox32 = (0.5 * vox).astype(np.float32)
        params32 = params.astype(np.float32)
        low = height_attention(vox32, column, params32)
        high = height_attention(vox32.astype(np.float64), column, params32.astype(np.float64))
        checks.append(_tolerance_check("mode_crossed_precision", case, _max_dev(low, high), MODE_CROSSED_TOL))

        # Partition / reverse is an exact bijection for every divisor spec
        failed = [
            spec.as_tuple() for spec in divisor_specs(dims)
            if not np.array_equal(reverse(height_partition(vox, spec), spec, dims), vox)
        ]
        checks.append(CheckResult(
            name="partition_bijection",
            case=case,
            passed=not failed,
            max_deviation=0.0 if not failed else None,
            tolerance=0.0,
            detail=f"failed specs: {failed}" if failed else None,
        ))

    summary = SuiteSummary(
        suite="equivalence", seed=seed, passed=all(c.passed for c in checks), checks=checks
    )
    logger.info(f"Equivalence suite: {len(checks)} checks, passed={summary.passed}")
    return summary


def _gradient_check(
    name: str,
    case: str,
    forward: Callable[[np.ndarray], np.ndarray],
    backward: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x: np.ndarray,
    cotangent: np.ndarray,
) -> CheckResult:
    """Compare the analytic gradient of sum(cotangent * forward(x)) with central differences"""
    numeric = finite_diff_grad(lambda t: float(np.sum(cotangent * forward(t))), x, FD_STEP)
    analytic = backward(x, cotangent)
    err = relative_error(analytic, numeric)
    worst = int(np.argmax(np.abs(analytic - numeric))) if x.size else 0
    return CheckResult(
        name=name,
        case=case,
        passed=err < GRADIENT_TOL,
        max_deviation=err,
        tolerance=GRADIENT_TOL,
        detail=None if err < GRADIENT_TOL else f"worst element {worst}",
    )


def run_gradcheck_suite(
    seed: int, sizes: Sequence[Dims], channels: int = 4, eps: float = 1e-5
) -> SuiteSummary:
    """Analytic input gradients vs. finite differences (float64, h = 1e-5)"""
    rng = np.random.default_rng(seed)
    checks: List[CheckResult] = []
    c = channels

    x = rng.standard_normal((4, 4))
    checks.append(_gradient_check(
        "softmax_rows", "4x4", softmax_rows,
        lambda t, p: softmax_rows_backward(softmax_rows(t), p), x, rng.standard_normal((4, 4)),
    ))

    gain, bias = 1.0 + 0.1 * rng.standard_normal(c), 0.1 * rng.standard_normal(c)
    for case, x in (("random", rng.standard_normal((3, c))), ("constant", np.full((1, c), 0.5))):
        centered = x - x.mean(axis=-1, keepdims=True)
        if np.min(np.mean(centered * centered, axis=-1)) < SINGULAR_VARIANCE:
            checks.append(CheckResult(
                name="layer_norm", case=case, passed=True, skipped=True,
                detail="zero-variance input",
            ))
            continue
        checks.append(_gradient_check(
            "layer_norm", case,
            lambda t: layer_norm(t, gain, bias, eps),
            lambda t, p: layer_norm_backward(t, gain, p, eps),
            x, rng.standard_normal(x.shape),
        ))

    params = init_layer_params(rng, c, 4 * c)
    x = rng.standard_normal((3, c))
    checks.append(_gradient_check(
        "mlp", f"3x{c}",
        lambda t: mlp_forward(t, params),
        lambda t, p: mlp_backward(t, params, p),
        x, rng.standard_normal(x.shape),
    ))

    for dims in _check_sizes(sizes):
        case = _case(dims, c)
        seq = height_partition(rng.standard_normal((c,) + dims), PartitionSpec.column(dims[2]))
        head_counts = [1, 2] if c % 2 == 0 and c > 1 else [1]
        for heads in head_counts:
            checks.append(_gradient_check(
                "attention", f"{case} heads={heads}",
                lambda t, h=heads: vanilla_attention(t, params, None, h),
                lambda t, p, h=heads: attention_backward(t, params, p, h),
                seq, rng.standard_normal(seq.shape),
            ))
        checks.append(_gradient_check(
            "transformer_block", case,
            lambda t: transformer_block(t, params, None, 1, eps),
            lambda t, p: transformer_block_backward(t, params, p, 1, eps),
            seq, rng.standard_normal(seq.shape),
        ))

    summary = SuiteSummary(
        suite="gradcheck", seed=seed, passed=all(ch.passed for ch in checks), checks=checks
    )
    logger.info(f"Gradcheck suite: {len(checks)} checks, passed={summary.passed}")
    return summary


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Least-squares slope of log(y) against log(x); None when fewer than two sizes"""
    if len(set(xs)) < 2:
        return None
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=np.float64)),
                          np.log(np.asarray(ys, dtype=np.float64)), 1)
    return float(slope)


def _timed(
    fn: Callable[[FlopLedger], np.ndarray],
    repeats: int,
    counted: Callable[[FlopLedger], int] = lambda led: led.tracked_macs,
) -> Tuple[float, int]:
    """Median wall time over repeats after one warmup run, and MACs of one run"""
    fn(FlopLedger())
    times = []
    macs = []
    for _ in range(repeats):
        ledger = FlopLedger()
        start = time.perf_counter()
        fn(ledger)
        times.append(time.perf_counter() - start)
        macs.append(counted(ledger))
    if len(set(macs)) != 1:
        raise RuntimeError(f"MAC counts changed between repeats: {macs}")
    return statistics.median(times), macs[0]


def run_scaling_benchmark(
    sizes: Sequence[Dims],
    partition: Sequence[int],
    channels: int,
    repeats: int = 3,
    seed: int = 0,
    dtype=np.float32,
    parallel: bool = False,
    workers: int = 4,
    chunk_size: int = 1024,
) -> BenchReport:
    """Vanilla, height and BEV-window attention and 3D convolution over a sweep of grid sizes"""
    if repeats < 3:
        raise ConfigurationError("repeats must be at least 3")
    dims_list = [tuple(int(s) for s in size) for size in sizes]
    tokens_list = [d[0] * d[1] * d[2] for d in dims_list]
    if tokens_list != sorted(tokens_list):
        raise ConfigurationError("benchmark sizes must be ascending")

    rng = np.random.default_rng(seed)
    params = init_layer_params(rng, channels, 4 * channels, dtype)
    kernel = 3
    conv_weight = (
        rng.standard_normal((kernel,) * 3 + (channels, channels)) / math.sqrt(kernel ** 3 * channels)
    ).astype(dtype)
    conv_bias = np.zeros(channels, dtype=dtype)
    records: List[BenchRecord] = []
    costs: Dict[str, List[OperatorCost]] = {}

    for dims, tokens in zip(dims_list, tokens_list):
        x, y, z = dims
        spec = PartitionSpec.resolve(partition, dims)
        vox = rng.standard_normal((channels, x, y, z)).astype(dtype)
        flat = np.ascontiguousarray(vox.reshape(channels, -1).T)

        seconds, macs = _timed(lambda led: vanilla_attention(flat, params, led), repeats)
        records.append(BenchRecord(
            size=dims, tokens=tokens, op="vanilla_attention",
            macs_predicted=complexity_vanilla(dims, channels), macs_measured=macs, seconds=seconds,
        ))
        seconds, macs = _timed(
            lambda led: height_attention(
                vox, spec, params, led, parallel=parallel, workers=workers, chunk_size=chunk_size
            ),
            repeats,
        )
        records.append(BenchRecord(
            size=dims, tokens=tokens, op="height_attention",
            macs_predicted=complexity_height(dims, spec, channels), macs_measured=macs, seconds=seconds,
        ))
        window = window_spec(dims)
        seconds, macs = _timed(lambda led: height_attention(vox, window, params, led), repeats)
        records.append(BenchRecord(
            size=dims, tokens=tokens, op="bev_window_attention",
            macs_predicted=complexity_height(dims, window, channels), macs_measured=macs, seconds=seconds,
        ))
        seconds, macs = _timed(
            lambda led: conv3d(vox, conv_weight, conv_bias, led), repeats, lambda led: led.other_macs
        )
        records.append(BenchRecord(
            size=dims, tokens=tokens, op="conv3d",
            macs_predicted=complexity_conv3d(dims, channels, kernel), macs_measured=macs, seconds=seconds,
        ))
        costs[f"{x}x{y}x{z}"] = [
            OperatorCost(operator=name, macs=value)
            for name, value in operator_complexities(dims, spec, channels, kernel=kernel).items()
        ]
        logger.info(f"Benchmarked grid {dims} ({tokens} tokens)")

    slopes: Dict[str, Dict[str, Optional[float]]] = {}
    for op in ("vanilla_attention", "height_attention", "bev_window_attention", "conv3d"):
        rows = [r for r in records if r.op == op]
        xs = [r.tokens for r in rows]
        slopes[op] = {
            "macs": fit_loglog_slope(xs, [r.macs_measured for r in rows]),
            "seconds": fit_loglog_slope(xs, [max(r.seconds, 1e-12) for r in rows]),
        }

    return BenchReport(
        records=records,
        slopes=slopes,
        partition=tuple(int(p) for p in partition),
        channels=channels,
        repeats=repeats,
        parallel=parallel,
        operator_costs=costs,
    )


def report_to_csv(report: BenchReport) -> str:
    lines = ["size,op,macs_predicted,macs_measured,seconds"]
    for r in report.records:
        size = "x".join(str(d) for d in r.size)
        lines.append(f"{size},{r.op},{r.macs_predicted},{r.macs_measured},{r.seconds:.9f}")
    lines.append("")
    lines.append("# summary")
    lines.append("op,metric,slope")
    for op, metrics in report.slopes.items():
        for metric, value in metrics.items():
            lines.append(f"{op},{metric},{'n/a' if value is None else f'{value:.9f}'}")
    return "\n".join(lines) + "\n"
