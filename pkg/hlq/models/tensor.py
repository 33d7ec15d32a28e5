"""Dense float32 tensor and the shape algebra the rest of the library consumes."""
from dataclasses import dataclass

import numpy as np

from hlq.errors.handlers import DimensionError, NonFiniteError, ParameterError

MAX_RANK = 4


class Tensor:
    """Immutable row-major float32 array of rank <= 4."""

    __slots__ = ("_data",)

    def __init__(self, data, shape=None):
        arr = np.array(data, dtype=np.float32)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape, dtype=np.int64)) != arr.size:
                raise DimensionError(
                    f"shape {shape} needs {int(np.prod(shape))} values, got {arr.size}"
                )
            arr = arr.reshape(shape)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def from_external(cls, values, shape=None):
        """Build a tensor from user-supplied values, rejecting NaN/Inf."""
        tensor = cls(values, shape)
        if not np.all(np.isfinite(tensor.data)):
            raise NonFiniteError("tensor input contains NaN or Inf")
        return tensor

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape, dtype=np.float32))

    @property
    def data(self):
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def size(self):
        return self._data.size

    def numpy(self):
        """Writable copy of the payload."""
        return self._data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


@dataclass(frozen=True)
class LayerDims:
    """Batch, sequence (H*W for conv), input and output channel extents."""

    B: int
    L: int
    I: int
    O: int

    def __post_init__(self):
        for name in ("B", "L", "I", "O"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ParameterError(f"LayerDims.{name} must be a positive integer, got {value!r}")

    def padded_L(self, n):
        return padded_extent(self.L, n)


def padded_extent(extent, n):
    """Smallest multiple of n that is >= extent."""
    return -(-int(extent) // int(n)) * int(n)


def _normalize_axis(t, axis):
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {t.ndim}")
    return axis % t.ndim


def matmul(a, b):
    """c[m, n] = sum_k a[m, k] * b[k, n].

    Accumulates in float64 and rounds once to float32, so the result does not
    depend on the BLAS blocking order.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64))
    return Tensor(out)


def reshape(t, shape):
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1], dtype=np.int64))
        if known == 0 or t.size % known:
            raise DimensionError(f"cannot infer -1 in {shape} for {t.size} values")
        shape = tuple(t.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise DimensionError(f"cannot reshape {t.shape} to {shape}")
    return Tensor(t.data.reshape(shape))


def transpose(t, axes=None):
    if axes is not None and sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {t.ndim}")
    return Tensor(np.transpose(t.data, axes))


def pad_axis(t, axis, to_multiple):
    """Zero-fill the tail of `axis` up to the next multiple of `to_multiple`."""
    if to_multiple < 1:
        raise ParameterError(f"to_multiple must be >= 1, got {to_multiple}")
    axis = _normalize_axis(t, axis)
    extent = t.shape[axis]
    target = padded_extent(extent, to_multiple)
    if target == extent:
        return t
    widths = [(0, 0)] * t.ndim
    widths[axis] = (0, target - extent)
    return Tensor(np.pad(t.data, widths))


def crop_axis(t, axis, extent):
    """Keep the first `extent` entries of `axis`; inverse of pad_axis."""
    axis = _normalize_axis(t, axis)
    if extent > t.shape[axis]:
        raise DimensionError(f"cannot crop axis of extent {t.shape[axis]} to {extent}")
    if extent == t.shape[axis]:
        return t
    index = [slice(None)] * t.ndim
    index[axis] = slice(0, extent)
    return Tensor(t.data[tuple(index)])
