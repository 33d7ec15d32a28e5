"""Backward-pass strategies for a linear (or im2col-lowered conv) layer.

Layout: x is (B, L, I), w is (O, I), g_y is (B, L, O) and y = x . w^T.
g_w carries the 1/B of the batch mean; g_x is the per-sample input gradient.
"""
import logging

import numpy as np

from hlq.errors.handlers import DimensionError, ParameterError, StateError
from hlq.models.strategy import ACBPActivation, BackwardStrategy, GradPair, GradPath, StrategyKind
from hlq.models.tensor import Tensor, crop_axis, matmul, pad_axis, reshape, transpose
from hlq.ops.hadamard import block_ht, default_bases, make_plan, project_lowrank, unproject_lowrank
from hlq.ops.quantize import int_matmul, quantize

logger = logging.getLogger(__name__)

BATCH_AXIS = 0
SEQUENCE_AXIS = 1


def _check_layer(x_shape, w, g_y):
    if len(x_shape) != 3 or w.ndim != 2 or g_y.ndim != 3:
        raise DimensionError(
            f"expected x (B, L, I), w (O, I), g_y (B, L, O); got {x_shape}, {w.shape}, {g_y.shape}"
        )
    B, L, I = x_shape
    O = w.shape[0]
    if w.shape[1] != I or g_y.shape != (B, L, O):
        raise DimensionError(
            f"inconsistent layer shapes: x {x_shape}, w {w.shape}, g_y {g_y.shape}"
        )


def ht_axis(B, L, n, pad_short_axes=True):
    """Axis carrying the g_w-path transform: L when L >= n, otherwise B.

    Along B the projection averages neighbouring samples, so unlike the L
    path the result depends on the order of samples in the batch.
    """
    if L >= n:
        return SEQUENCE_AXIS
    if B >= n:
        return BATCH_AXIS
    if pad_short_axes:
        return SEQUENCE_AXIS
    raise DimensionError(f"both B={B} and L={L} are shorter than block size {n} and padding is off")


def _resolve_rounding(rounding, rng):
    if rounding is not None:
        return rounding
    return "stochastic" if rng is not None else "pseudo"


def _scaled(t, factor):
    if factor == 1.0:
        return t
    return Tensor(t.data.astype(np.float64) * factor)


def _gemm(a, b, bits, rounding, rng, scale_axes=(None, None), factor=1.0):
    """a . b, optionally with both operands quantized independently first."""
    if bits is None:
        return _scaled(matmul(a, b), factor)
    left = rng.split(0) if rng is not None else None
    right = rng.split(1) if rng is not None else None
    qa = quantize(a, bits, rounding, left, scale_axes[0])
    qb = quantize(b, bits, rounding, right, scale_axes[1])
    return int_matmul(qa, qb).dequantize(factor)


def _plan_for(strategy, path, axis, extent):
    """Transform plan for `path` along `axis`, whose real length is `extent`.

    An axis no longer than the rank is kept at full rank: zero-padding it to
    a block and dropping bases would shrink the gradient by rank / n.
    """
    n = strategy.block_size
    if path.rank is None or path.rank == n or extent <= path.rank:
        return make_plan(n, n, axis, tuple(range(n)))
    bases = strategy.basis_indices
    if bases is None or len(bases) != path.rank:
        bases = default_bases(n, path.rank)
    return make_plan(n, path.rank, axis, bases)


def to_frequency(t, plan):
    """Zero-pad the plan's axis, then block HT (full rank) or low-rank projection."""
    padded = pad_axis(t, plan.target_axis, plan.block_size)
    if plan.full_rank:
        return block_ht(padded, plan)
    return project_lowrank(padded, plan)


def from_frequency(t, plan, extent):
    if plan.full_rank:
        return crop_axis(block_ht(t, plan), plan.target_axis, extent)
    return unproject_lowrank(t, plan, extent)


def _flatten_rows(t):
    return reshape(t, (-1, t.shape[-1]))


def compute_grad_x(g_y, w, path, strategy, rng=None, transformed_weight=None):
    """g_x = g_y . w under one GradPath treatment."""
    B, L, O = g_y.shape
    I = w.shape[1]
    n = strategy.block_size
    scale_axes = (0, 1) if strategy.per_row_gx else (None, None)

    if path.low_rank:
        # LBP-WHT style: project g_y along L (or B), multiply, inverse-project
        axis = ht_axis(B, L, n, strategy.pad_short_axes)
        extent = g_y.shape[axis]
        plan = _plan_for(strategy, path, axis, extent)
        g_y_hat = to_frequency(g_y, plan)
        product = _gemm(_flatten_rows(g_y_hat), w, path.bits, strategy.rounding, rng, scale_axes)
        shrunk = reshape(product, g_y_hat.shape[:2] + (I,))
        return from_frequency(shrunk, plan, extent)

    g_y_rows = _flatten_rows(g_y)
    if path.hadamard:
        g_y_rows, w_freq = hadamard_on_outputs(g_y_rows, w, n, transformed_weight)
        product = _gemm(g_y_rows, w_freq, path.bits, strategy.rounding, rng, scale_axes)
    else:
        product = _gemm(g_y_rows, w, path.bits, strategy.rounding, rng, scale_axes)
    return reshape(product, (B, L, I))


def transform_weight(w, n):
    """H_O^T . w with O zero-padded to a multiple of n."""
    plan = make_plan(n, n, 0, tuple(range(n)))
    return block_ht(pad_axis(w, 0, n), plan)


def hadamard_on_outputs(g_y_rows, w, n, transformed_weight=None):
    """Map both g_x operands through the block HT on O; H_O . H_O^T = I cancels."""
    plan = make_plan(n, n, 1, tuple(range(n)))
    g_y_freq = block_ht(pad_axis(g_y_rows, 1, n), plan)
    w_freq = transformed_weight if transformed_weight is not None else transform_weight(w, n)
    if w_freq.shape != (g_y_freq.shape[1], w.shape[1]):
        raise StateError(f"cached transformed weight has shape {w_freq.shape}")
    return g_y_freq, w_freq


def compute_grad_w(x_or_acbp, g_y, path, strategy, rng=None):
    """g_w = (1/B) . g_y^T . x under one GradPath treatment, 1/B folded into the scale."""
    B, L, O = g_y.shape
    factor = 1.0 / B
    scale_axes = (0, 1) if strategy.per_channel_gw else (None, None)

    axis = ht_axis(B, L, strategy.block_size, strategy.pad_short_axes)
    if isinstance(x_or_acbp, ACBPActivation):
        plan = _plan_for(strategy, path, axis, g_y.shape[axis])
        return hlq_gw(x_or_acbp, g_y, plan, path.bits, rng, strategy.rounding, strategy.per_channel_gw)

    x = x_or_acbp
    if path.hadamard:
        plan = _plan_for(strategy, path, axis, g_y.shape[axis])
        x_rows = _flatten_rows(to_frequency(x, plan))
        g_y_rows = _flatten_rows(to_frequency(g_y, plan))
    else:
        x_rows = _flatten_rows(x)
        g_y_rows = _flatten_rows(g_y)
    return _gemm(transpose(g_y_rows), x_rows, path.bits, strategy.rounding, rng, scale_axes, factor)


def backward(x_or_acbp, w, g_y, strategy, rng=None, transformed_weight=None):
    """Dispatch both gradient GEMMs of one layer according to `strategy`.

    `transformed_weight` is an H_O^T . w cached by the caller, reused by an
    HT-on-O g_x path instead of transforming w again.
    """
    x_shape = (
        x_or_acbp.original_shape if isinstance(x_or_acbp, ACBPActivation) else x_or_acbp.shape
    )
    _check_layer(tuple(x_shape), w, g_y)
    if strategy.quantized and strategy.rounding == "stochastic" and rng is None:
        raise ParameterError("stochastic rounding needs an RngState")
    rng_x = rng.split(1) if rng is not None else None
    rng_w = rng.split(2) if rng is not None else None
    g_x = compute_grad_x(g_y, w, strategy.grad_x, strategy, rng_x, transformed_weight)
    g_w = compute_grad_w(x_or_acbp, g_y, strategy.grad_w, strategy, rng_w)
    return GradPair(g_x, g_w)


def vanilla_backward(x, w, g_y, dims=None):
    """Exact gradients: g_w = (1/B) g_y^T x, g_x = g_y w."""
    if dims is not None and x.shape != (dims.B, dims.L, dims.I):
        raise DimensionError(f"x shape {x.shape} does not match {dims}")
    return backward(x, w, g_y, BackwardStrategy.vanilla())


def lbp_wht_backward(x, w, g_y, plan):
    """Low-rank projection of both gradient paths, fp32 arithmetic.

    The plan fixes block size and bases; its axis is re-chosen by ht_axis.
    A full-rank plan degenerates to the exact gradients.
    """
    path = GradPath(rank=plan.rank)
    strategy = BackwardStrategy(
        StrategyKind.LBP_WHT, path, path,
        block_size=plan.block_size, basis_indices=plan.basis_indices,
    )
    return backward(x, w, g_y, strategy)


def naive_quant_backward(x, w, g_y, bits, rng=None, rounding=None):
    """Exact-gradient GEMMs with both operands quantized, no transform."""
    strategy = BackwardStrategy.naive(bits, rounding=_resolve_rounding(rounding, rng))
    return backward(x, w, g_y, strategy, rng)


def hq_gx(g_y, w, bits, rng=None, rounding=None, block_size=16, transformed_weight=None, per_row=True):
    """g_x = Q(g_y H_O) . Q(H_O^T w); bits=None runs the transform without quantizers.

    per_row scales each transformed g_y row and each w column on its own.
    """
    if g_y.ndim != 3 or w.ndim != 2 or g_y.shape[2] != w.shape[0]:
        raise DimensionError(f"g_y {g_y.shape} and w {w.shape} do not chain")
    strategy = BackwardStrategy.custom(
        GradPath(bits=bits, hadamard=True), GradPath(),
        block_size=block_size, rounding=_resolve_rounding(rounding, rng), per_row_gx=per_row,
    )
    return compute_grad_x(g_y, w, strategy.grad_x, strategy, rng, transformed_weight)


def hlq_gw_forward_stage(x, plan, bits_gw, rng=None, rounding=None, per_channel=False):
    """Stages 1-2 of the g_w pipeline, run during forward: project x, quantize, keep."""
    if x.ndim != 3:
        raise DimensionError(f"expected x (B, L, I), got {x.shape}")
    if bits_gw is None:
        raise ParameterError("compressed activations need a quantizer bit-width")
    projected = to_frequency(x, plan)
    quantized = quantize(
        projected, bits_gw, _resolve_rounding(rounding, rng), rng,
        scale_axis=2 if per_channel else None,
    )
    logger.debug("ACBP stored %s as %s at %d bits", x.shape, projected.shape, bits_gw)
    return ACBPActivation(quantized, plan, tuple(x.shape))


def hlq_gw(acbp, g_y, plan, bits_gw, rng=None, rounding=None, per_channel=False):
    """Stages 3-6: project g_y^T with the same bases, quantize, integer GEMM, dequantize / B."""
    if not plan.matches(acbp.plan) or plan.target_axis != acbp.plan.target_axis:
        raise StateError(f"backward plan {plan} does not match the stored activation's {acbp.plan}")
    B, L, _ = acbp.original_shape
    if g_y.shape[:2] != (B, L):
        raise StateError(f"g_y shape {g_y.shape} does not match stored activation {acbp.original_shape}")
    if bits_gw is None:
        raise ParameterError("compressed activations need a quantizer bit-width")
    g_y_rows = _flatten_rows(to_frequency(g_y, plan))
    q_g_y = quantize(
        transpose(g_y_rows), bits_gw, _resolve_rounding(rounding, rng),
        rng.split(0) if rng is not None else None,
        scale_axis=0 if per_channel else None,
    )
    x_rows = acbp.as_matrix()
    if x_rows.shape[0] != q_g_y.shape[1]:
        raise StateError(f"stored activation rows {x_rows.shape[0]} != projected g_y rows {q_g_y.shape[1]}")
    return int_matmul(q_g_y, x_rows).dequantize(1.0 / B)


def hlq_backward(x_or_acbp, w, g_y, strategy, rng=None):
    """int4 HQ on g_x at full rank, int8 HLA on g_w (from ACBP state when given)."""
    if strategy.kind is not StrategyKind.HLQ:
        raise ParameterError(f"hlq_backward needs an HLQ strategy, got {strategy.name}")
    return backward(x_or_acbp, w, g_y, strategy, rng)


def acbp_plan(strategy, x_shape):
    """Plan the forward stage must use so that backward finds a matching activation."""
    B, L, _ = x_shape
    axis = ht_axis(B, L, strategy.block_size, strategy.pad_short_axes)
    return _plan_for(strategy, strategy.grad_w, axis, x_shape[axis])
