"""Walsh-Hadamard matrices, the fast transform and low-rank basis projection."""
import logging

import numpy as np

from config.settings import Config
from hlq.errors.handlers import DimensionError, ParameterError
from hlq.models.plan import HadamardPlan
from hlq.models.tensor import Tensor, padded_extent

logger = logging.getLogger(__name__)

_H1_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0]])


def walsh_matrix(k):
    """Orthonormal Sylvester-ordered Walsh matrix of order 2**k, H_k = H_1 (x) H_{k-1}."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)):
        raise ParameterError(f"Walsh order must be an integer, got {k!r}")
    if not 1 <= k <= Config.MAX_WALSH_ORDER:
        raise ParameterError(f"Walsh order must lie in [1, {Config.MAX_WALSH_ORDER}], got {k}")
    signs = np.ones((1, 1))
    for _ in range(k):
        signs = np.kron(_H1_SIGNS, signs)
    return Tensor(signs / np.sqrt(2.0**k))


def sequency_order(n):
    """Sign-change count of every natural-order row of the size-n Walsh matrix."""
    k = _log2(n)
    if k == 0:
        return [0]
    rows = walsh_matrix(k).data
    return [int(np.count_nonzero(np.diff(np.sign(row)))) for row in rows]


def default_bases(n, r):
    """Natural indices of the r lowest-sequency Walsh rows."""
    if not 1 <= r <= n:
        raise ParameterError(f"rank must lie in [1, {n}], got {r}")
    sequency = sequency_order(n)
    order = sorted(range(n), key=lambda i: (sequency[i], i))
    return tuple(sorted(order[:r]))


def make_plan(block_size=Config.BLOCK_SIZE, rank=Config.RANK, target_axis=0, basis_indices=None):
    if basis_indices is None:
        basis_indices = default_bases(block_size, rank)
    elif len(basis_indices) != rank:
        raise ParameterError(f"{len(basis_indices)} basis indices given for rank {rank}")
    return HadamardPlan(block_size, target_axis, tuple(basis_indices))


def _log2(n):
    if n < 1 or n & (n - 1):
        raise DimensionError(f"length must be a power of two, got {n}")
    return int(n).bit_length() - 1


def _fwht_last_axis(arr):
    # n*log2(n) add/sub butterflies, then one scaling pass
    n = arr.shape[-1]
    lead = arr.shape[:-1]
    out = arr.astype(np.float64).reshape(-1, n)
    h = 1
    while h < n:
        view = out.reshape(out.shape[0], n // (2 * h), 2, h)
        top = view[:, :, 0, :] + view[:, :, 1, :]
        bottom = view[:, :, 0, :] - view[:, :, 1, :]
        out = np.stack((top, bottom), axis=2).reshape(-1, n)
        h *= 2
    out *= 1.0 / np.sqrt(n)
    return out.reshape(lead + (n,))


def fwht(v):
    """Fast orthonormal Walsh-Hadamard transform of a rank-1 tensor."""
    if v.ndim != 1:
        raise DimensionError(f"fwht expects a rank-1 tensor, got shape {v.shape}")
    _log2(v.shape[0])
    return Tensor(_fwht_last_axis(v.data))


def _split_blocks(t, axis, n):
    """Move `axis` last and split it into (num_blocks, n)."""
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {t.ndim}")
    axis %= t.ndim
    extent = t.shape[axis]
    if extent % n:
        raise DimensionError(f"axis {axis} extent {extent} is not a multiple of block size {n}")
    moved = np.moveaxis(t.data, axis, -1)
    return moved.reshape(moved.shape[:-1] + (extent // n, n)), axis


def _merge_blocks(blocks, axis):
    merged = blocks.reshape(blocks.shape[:-2] + (blocks.shape[-2] * blocks.shape[-1],))
    return Tensor(np.moveaxis(merged, -1, axis))


def block_ht(t, plan):
    """Independent n-point transforms over consecutive blocks of the plan's axis."""
    blocks, axis = _split_blocks(t, plan.target_axis, plan.block_size)
    return _merge_blocks(_fwht_last_axis(blocks), axis)


def basis_coefficients(t, axis, n):
    """Block-HT coefficients of `axis` gathered as rows of a (num_rows x n) matrix."""
    blocks, _ = _split_blocks(t, axis, n)
    return Tensor(_fwht_last_axis(blocks).reshape(-1, n))


def select_bases(calib, r):
    """Indices of the r bases with the largest mean |coefficient|; ties go to the lower index."""
    if calib.ndim != 2:
        raise DimensionError(f"calibration matrix must be rank 2, got shape {calib.shape}")
    n = calib.shape[1]
    if not 1 <= r <= n:
        raise ParameterError(f"rank must lie in [1, {n}], got {r}")
    means = np.mean(np.abs(calib.data.astype(np.float64)), axis=0)
    order = np.argsort(-means, kind="stable")
    selected = tuple(sorted(int(i) for i in order[:r]))
    logger.debug("selected bases %s from %d calibration rows", selected, calib.shape[0])
    return selected


def project_lowrank(t, plan):
    """Block HT on the plan's axis keeping only the selected bases; extent shrinks by r/n."""
    if plan.full_rank:
        raise ParameterError("full-rank plan has nothing to drop; use block_ht")
    blocks, axis = _split_blocks(t, plan.target_axis, plan.block_size)
    coefficients = _fwht_last_axis(blocks)[..., list(plan.basis_indices)]
    return _merge_blocks(coefficients, axis)


def unproject_lowrank(t, plan, original_extent):
    """Scatter kept coefficients back to n slots per block, invert the HT, crop to original_extent."""
    n, r = plan.block_size, plan.rank
    if not -t.ndim <= plan.target_axis < t.ndim:
        raise DimensionError(f"axis {plan.target_axis} out of range for rank {t.ndim}")
    axis = plan.target_axis % t.ndim
    num_blocks = padded_extent(original_extent, n) // n
    if t.shape[axis] != num_blocks * r:
        raise DimensionError(
            f"axis extent {t.shape[axis]} does not match {num_blocks} blocks of rank {r}"
        )
    moved = np.moveaxis(t.data, axis, -1)
    coefficients = moved.reshape(moved.shape[:-1] + (num_blocks, r))
    full = np.zeros(coefficients.shape[:-1] + (n,), dtype=np.float64)
    full[..., list(plan.basis_indices)] = coefficients
    restored = _merge_blocks(_fwht_last_axis(full), axis)
    index = [slice(None)] * t.ndim
    index[axis] = slice(0, original_extent)
    return Tensor(restored.data[tuple(index)])
