"""Symmetric min-max quantizers, dequantization and simulated integer GEMM."""
import logging

import numpy as np

from config.settings import Config
from hlq.errors.handlers import DimensionError, NonFiniteError, ParameterError
from hlq.models.quantized import IntAccumulator, QuantizedTensor, qmax
from hlq.models.tensor import Tensor

logger = logging.getLogger(__name__)

ROUNDING_MODES = ("stochastic", "pseudo")
_PSEUDO_MASK = (1 << Config.PSEUDO_RANDOM_BITS) - 1
_PSEUDO_RANGE = float(1 << Config.PSEUDO_RANDOM_BITS)


def _check_input(t, bits, scale_axis):
    if bits not in Config.SUPPORTED_BITS:
        raise ParameterError(f"bits must be one of {Config.SUPPORTED_BITS}, got {bits}")
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError("cannot quantize a tensor containing NaN or Inf")
    if scale_axis is not None and not -t.ndim <= scale_axis < t.ndim:
        raise DimensionError(f"scale axis {scale_axis} out of range for rank {t.ndim}")


def compute_scale(t, bits, scale_axis=None):
    """max|t| / qmax per tensor or per index of `scale_axis`; all-zero slices get 1."""
    magnitude = np.abs(t.data)
    if scale_axis is None:
        absmax = np.array([magnitude.max() if magnitude.size else 0.0], dtype=np.float32)
    else:
        axis = scale_axis % t.ndim
        others = tuple(a for a in range(t.ndim) if a != axis)
        if magnitude.size:
            absmax = magnitude.max(axis=others).astype(np.float32)
        else:
            absmax = np.zeros(t.shape[axis], dtype=np.float32)
    scale = absmax / np.float32(qmax(bits))
    scale[scale == 0] = 1.0
    return scale


def _quotient(t, scale, scale_axis):
    if scale_axis is None:
        return t.data.astype(np.float64) / np.float64(scale[0])
    shape = [1] * t.ndim
    shape[scale_axis % t.ndim] = scale.size
    return t.data.astype(np.float64) / scale.reshape(shape).astype(np.float64)


def _finish(floor, round_up, bits, scale, scale_axis):
    limit = qmax(bits)
    payload = np.clip(floor + round_up, -limit, limit).astype(np.int8)
    return QuantizedTensor(payload, bits, scale, scale_axis)


def quant_stochastic(t, bits, rng, scale_axis=None):
    """Round q = v/scale up with probability frac(q); unbiased in expectation."""
    _check_input(t, bits, scale_axis)
    scale = compute_scale(t, bits, scale_axis)
    q = _quotient(t, scale, scale_axis)
    floor = np.floor(q)
    uniform = rng.generator().random(q.shape)
    return _finish(floor, uniform < (q - floor), bits, scale, scale_axis)


def quant_pseudo_stochastic(t, bits, scale_axis=None):
    """Round up iff frac(q)*2048 exceeds the low 11 bits of v's float32 pattern."""
    _check_input(t, bits, scale_axis)
    scale = compute_scale(t, bits, scale_axis)
    q = _quotient(t, scale, scale_axis)
    floor = np.floor(q)
    pseudo = (t.data.view(np.uint32) & _PSEUDO_MASK).astype(np.float64)
    return _finish(floor, (q - floor) * _PSEUDO_RANGE > pseudo, bits, scale, scale_axis)


def quantize(t, bits, rounding=Config.ROUNDING, rng=None, scale_axis=None):
    if rounding == "stochastic":
        if rng is None:
            raise ParameterError("stochastic rounding needs an RngState")
        return quant_stochastic(t, bits, rng, scale_axis)
    if rounding == "pseudo":
        return quant_pseudo_stochastic(t, bits, scale_axis)
    raise ParameterError(f"rounding must be one of {ROUNDING_MODES}, got {rounding!r}")


def dequant(q):
    return q.to_tensor()


def int_matmul(a, b):
    """Integer-exact product of two quantized matrices.

    Payloads are multiplied through float64, which is exact while every
    partial sum stays below 2**53; the inner-extent guard keeps it there.
    `a` may carry per-row scales and `b` per-column scales.
    """
    if a.payload.ndim != 2 or b.payload.ndim != 2:
        raise DimensionError(f"int_matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    inner = a.shape[1]
    limit = min(Config.MAX_INNER_EXTENT[a.bits], Config.MAX_INNER_EXTENT[b.bits])
    if inner > limit:
        raise ParameterError(f"inner extent {inner} risks accumulator overflow (limit {limit})")
    if a.scale_axis not in (None, 0):
        raise ParameterError("left operand scales must be per-tensor or per-row")
    if b.scale_axis not in (None, 1):
        raise ParameterError("right operand scales must be per-tensor or per-column")

    product = np.matmul(a.payload.astype(np.float64), b.payload.astype(np.float64))
    values = np.rint(product).astype(np.int64)
    left = a.scale.astype(np.float64).reshape(-1, 1) if a.scale_axis == 0 else np.float64(a.scale[0])
    right = b.scale.astype(np.float64).reshape(1, -1) if b.scale_axis == 1 else np.float64(b.scale[0])
    return IntAccumulator(values, np.asarray(left * right))
