import math
from dataclasses import dataclass, replace

from hlq.errors.handlers import ParameterError


@dataclass(frozen=True)
class HadamardPlan:
    """Block size, target axis and kept Walsh bases for the HT/HLA operations.

    A plan whose rank equals its block size is a pure block-diagonal HT.
    The orthonormal 1/sqrt(n) factor is always applied by the transforms.
    """

    block_size: int
    target_axis: int
    basis_indices: tuple

    def __post_init__(self):
        n = self.block_size
        if n < 2 or n & (n - 1):
            raise ParameterError(f"block size must be a power of two >= 2, got {n}")
        indices = tuple(int(i) for i in self.basis_indices)
        if not 1 <= len(indices) <= n:
            raise ParameterError(f"rank must lie in [1, {n}], got {len(indices)}")
        if len(set(indices)) != len(indices):
            raise ParameterError(f"basis indices must be distinct: {indices}")
        if any(i < 0 or i >= n for i in indices):
            raise ParameterError(f"basis indices must lie in [0, {n}): {indices}")
        object.__setattr__(self, "basis_indices", tuple(sorted(indices)))

    @property
    def rank(self):
        return len(self.basis_indices)

    @property
    def full_rank(self):
        return self.rank == self.block_size

    @property
    def scale(self):
        return 1.0 / math.sqrt(self.block_size)

    @property
    def basis_bitmap(self):
        bitmap = 0
        for index in self.basis_indices:
            bitmap |= 1 << index
        return bitmap

    def with_bases(self, indices):
        return replace(self, basis_indices=tuple(indices))

    def matches(self, other):
        """Same transform, ignoring the axis it is applied on."""
        return (
            self.block_size == other.block_size
            and self.basis_indices == other.basis_indices
        )

    @classmethod
    def from_bitmap(cls, block_size, bitmap, target_axis=0):
        indices = tuple(i for i in range(block_size) if bitmap >> i & 1)
        if bitmap >> block_size:
            raise ParameterError(f"bitmap {bitmap:#x} has bits beyond block size {block_size}")
        return cls(block_size, target_axis, indices)
