"""Closed-form FLOPs, bit-operations and memory accounting per layer and strategy.

Activation-sized terms are counted per sample and multiplied by B; terms on
the weight (its transform and quantizer, the g_w dequantize) are paid once
per step. Every transform, quantize or dequantize op counts as one overhead
FLOP; GEMMs count 2 FLOPs per MAC.
"""
import logging

from config.settings import Config
from hlq.errors.handlers import ParameterError
from hlq.models.reports import CostReport, GemmCost, LayerCost
from hlq.models.strategy import BackwardStrategy
from hlq.models.tensor import LayerDims, padded_extent
from hlq.ops.acbp import header_size
from hlq.ops.backprop import BATCH_AXIS, ht_axis

logger = logging.getLogger(__name__)


def _log2(n):
    if n < 1 or n & (n - 1):
        raise ParameterError(f"block size must be a power of two, got {n}")
    return int(n).bit_length() - 1


def projected_extent(L, n, r):
    """ceil(L * r / n): rows left after keeping r of every n bases."""
    return -(-L * r // n)


def _path_rank(path, n, r, extent):
    """Bases kept per block, or None at full rank (also when `extent` <= rank)."""
    if not path.low_rank:
        return None
    rank = path.rank if r is None else r
    if not 1 <= rank <= n:
        raise ParameterError(f"rank {rank} outside [1, {n}]")
    return rank if extent > rank else None


def _grad_x_cost(path, L, I, O, n, r):
    """(per-sample overhead, weight overhead, per-sample dequant, gemm) of g_x = g_y . w."""
    fp = Config.FP_BITS
    bits = path.bits or fp
    log_n = _log2(n)
    rank = _path_rank(path, n, r, L)
    overhead = 0
    weight = 0
    dequant = 0
    if rank is not None:
        rows = projected_extent(L, n, rank)
        overhead += 2 * L * O * log_n + 2 * L * I * log_n
        if path.quantized:
            overhead += 2 * rows * O
            weight += 2 * I * O
            dequant = 2 * rows * I
        return overhead, weight, dequant, GemmCost("g_x", rows * I * O, bits, bits)
    if path.hadamard:
        overhead += 2 * L * O * log_n
        weight += 2 * I * O * log_n
    if path.quantized:
        overhead += 2 * L * O
        weight += 2 * I * O
        dequant = 2 * L * I
    return overhead, weight, dequant, GemmCost("g_x", L * I * O, bits, bits)


def _grad_w_cost(path, L, I, O, n, r):
    """(per-sample overhead, g_w dequant, gemm); the dequant runs once on the (O, I) result."""
    fp = Config.FP_BITS
    bits = path.bits or fp
    log_n = _log2(n)
    rank = _path_rank(path, n, r, L)
    rows = L if rank is None else projected_extent(L, n, rank)
    overhead = 0
    dequant = 0
    if path.hadamard:
        overhead += 2 * L * I * log_n + 2 * L * O * log_n
    if path.quantized:
        overhead += 2 * I * rows + 2 * O * rows
        dequant = 2 * I * O
    return overhead, dequant, GemmCost("g_w", rows * I * O, bits, bits)


def layer_flops(dims, strategy, n=None, r=None, name="layer"):
    """Vanilla and strategy GEMM/overhead counts for one layer."""
    n = strategy.block_size if n is None else n
    B, L, I, O = dims.B, dims.L, dims.I, dims.O
    gx_overhead, gx_weight, gx_dequant, gx_gemm = _grad_x_cost(strategy.grad_x, L, I, O, n, r)
    gw_overhead, gw_dequant, gw_gemm = _grad_w_cost(strategy.grad_w, L, I, O, n, r)
    for gemm in (gx_gemm, gw_gemm):
        gemm.macs *= B
    fp = Config.FP_BITS
    return LayerCost(
        name=name, B=B, L=L, I=I, O=O, strategy=strategy.name,
        vanilla_flops=4 * B * L * I * O,
        gemms=[gx_gemm, gw_gemm],
        overhead={
            "gx": B * gx_overhead + gx_weight,
            "gw": B * gw_overhead,
            "dequant": B * gx_dequant + gw_dequant,
        },
        overhead_op_bits=Config.COST_OVERHEAD_OP_BITS,
        forward_bops=B * L * I * O * fp * fp,
    )


def layer_bops(dims, strategy, n=None, r=None, overhead_op_bits=None):
    """Backward bit-operations: sum of MACs * b_a * b_b plus overhead ops at `overhead_op_bits` each."""
    cost = layer_flops(dims, strategy, n, r)
    if overhead_op_bits is not None:
        cost.overhead_op_bits = overhead_op_bits
    return cost.backward_bops


def lbp_wht_dense_flops(dims, n=Config.BLOCK_SIZE, r=Config.RANK):
    """LBP-WHT total with a dense projection: (O + I) L L' + 4 O I L' + I L L'."""
    rows = projected_extent(dims.L, n, r)
    L, I, O = dims.L, dims.I, dims.O
    return dims.B * ((O + I) * L * rows + 4 * O * I * rows + I * L * rows)


def _activation_bytes(dims, strategy):
    """(payload bytes, header+scale bytes) kept from forward for the backward pass."""
    B, L, I = dims.B, dims.L, dims.I
    n = strategy.block_size
    path = strategy.grad_w
    if not path.low_rank:
        return 4 * B * L * I, 0
    axis = ht_axis(B, L, n, strategy.pad_short_axes)
    extent = B if axis == BATCH_AXIS else L
    # a padded axis no longer than the rank is stored at full rank
    kept = path.rank if extent > path.rank else n
    if axis == BATCH_AXIS:
        rows = padded_extent(B, n) // n * kept * L
    else:
        rows = B * (padded_extent(L, n) // n * kept)
    if strategy.stores_acbp:
        payload = -(-rows * I * path.bits // 8)
        num_scales = I if strategy.per_channel_gw else 1
        return payload, header_size(3, num_scales)
    return 4 * rows * I, 0


def memory_footprint(layers, strategy, batch=None, label=None):
    """Activation, weight and gradient storage over `layers` (pairs of name, LayerDims)."""
    baseline = BackwardStrategy.vanilla()
    label = label or strategy.name
    report = CostReport(label)
    for name, dims in layers:
        if batch is not None:
            dims = LayerDims(batch, dims.L, dims.I, dims.O)
        cost = layer_flops(dims, strategy, name=name)
        cost.strategy = label
        cost.activation_bytes, cost.activation_overhead_bytes = _activation_bytes(dims, strategy)
        cost.weight_bytes = 4 * dims.I * dims.O
        cost.grad_bytes = 4 * dims.I * dims.O
        report.layers.append(cost)
        activation, _ = _activation_bytes(dims, baseline)
        report.baseline_bytes += activation + cost.weight_bytes + cost.grad_bytes
    logger.debug("memory footprint for %d layers under %s: %d bytes", len(report.layers), label, report.total_bytes)
    return report
