from dataclasses import dataclass

import numpy as np

from hlq.errors.handlers import DimensionError, ParameterError
from hlq.models.tensor import Tensor

_MASK64 = (1 << 64) - 1


def qmax(bits):
    """Largest payload magnitude of the symmetric range [-qmax, qmax]."""
    return (1 << (bits - 1)) - 1


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Signed integer payload with symmetric scale(s); zero point is always 0.

    `scale` is a float32 vector: length 1 for a per-tensor scale, otherwise one
    entry per index of `scale_axis`.
    """

    payload: np.ndarray
    bits: int
    scale: np.ndarray
    scale_axis: int = None

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ParameterError(f"bits must be 4 or 8, got {self.bits}")
        payload = np.asarray(self.payload, dtype=np.int8)
        scale = np.asarray(self.scale, dtype=np.float32).reshape(-1)
        axis = self.scale_axis
        if axis is not None:
            axis %= payload.ndim
            if scale.size != payload.shape[axis]:
                raise DimensionError(
                    f"{scale.size} scales for axis {axis} of extent {payload.shape[axis]}"
                )
        elif scale.size != 1:
            raise DimensionError(f"per-tensor scale must have one entry, got {scale.size}")
        payload.flags.writeable = False
        scale.flags.writeable = False
        object.__setattr__(self, "payload", payload)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "scale_axis", axis)

    @property
    def shape(self):
        return self.payload.shape

    @property
    def zero_point(self):
        return 0

    @property
    def qmax(self):
        return qmax(self.bits)

    def broadcast_scale(self):
        """Scale reshaped to broadcast against the payload."""
        if self.scale_axis is None:
            return self.scale.reshape(())
        shape = [1] * self.payload.ndim
        shape[self.scale_axis] = self.scale.size
        return self.scale.reshape(shape)

    def reshape(self, shape):
        """Reshape the payload; a per-axis scale must stay on the last axis."""
        shape = tuple(shape)
        if self.scale_axis is None:
            return QuantizedTensor(self.payload.reshape(shape), self.bits, self.scale)
        if self.scale_axis != self.payload.ndim - 1 or shape[-1] != self.payload.shape[-1]:
            raise DimensionError("per-axis scales only survive reshapes that keep the last axis")
        return QuantizedTensor(self.payload.reshape(shape), self.bits, self.scale, len(shape) - 1)

    def to_tensor(self):
        return Tensor(self.payload.astype(np.float32) * self.broadcast_scale())


@dataclass(frozen=True)
class RngState:
    """Seed + counter for a counter-based (Philox) random stream.

    Identical state gives identical draws on every platform. Concurrent callers
    must each hold a child obtained through `split`.
    """

    seed: int
    counter: int = 0

    def split(self, *keys):
        entropy = [self.seed & _MASK64, self.counter & _MASK64]
        entropy.extend(int(k) & _MASK64 for k in keys)
        child = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
        return RngState(int(child))

    def advance(self, steps=1):
        return RngState(self.seed, self.counter + steps)

    def generator(self):
        bit_generator = np.random.Philox(key=self.seed & _MASK64, counter=self.counter)
        return np.random.Generator(bit_generator)


@dataclass(frozen=True, eq=False)
class IntAccumulator:
    """Exact integer GEMM result with the scale that maps it back to reals."""

    values: np.ndarray
    combined_scale: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self, factor=1.0):
        return Tensor(self.values.astype(np.float64) * (self.combined_scale * factor))
