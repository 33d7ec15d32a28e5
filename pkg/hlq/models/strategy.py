"""Backward-pass strategy configuration and the values exchanged with the backprop ops."""
from dataclasses import dataclass, field, replace
from enum import Enum

from config.settings import Config
from hlq.errors.handlers import ParameterError
from hlq.models.plan import HadamardPlan
from hlq.models.quantized import QuantizedTensor
from hlq.models.tensor import Tensor


class StrategyKind(str, Enum):
    VANILLA = "vanilla"
    NAIVE = "naive"
    HQ = "hq"
    LBP_WHT = "lbp-wht"
    HLQ = "hlq"
    CUSTOM = "custom"


@dataclass(frozen=True)
class GradPath:
    """Treatment of one gradient GEMM.

    bits=None keeps fp32; hadamard maps both operands through the block HT
    first; rank keeps that many bases per block (implies hadamard).
    """

    bits: int = None
    hadamard: bool = False
    rank: int = None

    def __post_init__(self):
        if self.bits is not None and self.bits not in Config.SUPPORTED_BITS:
            raise ParameterError(f"bits must be one of {Config.SUPPORTED_BITS}, got {self.bits}")
        if self.rank is not None:
            if self.rank < 1:
                raise ParameterError(f"rank must be positive, got {self.rank}")
            object.__setattr__(self, "hadamard", True)

    @property
    def quantized(self):
        return self.bits is not None

    @property
    def low_rank(self):
        return self.rank is not None

    @property
    def label(self):
        if self.low_rank:
            return "HLA" if not self.quantized else f"{self.bits}-bit+HLA"
        if not self.quantized:
            return "FP+HT" if self.hadamard else "FP"
        return f"{self.bits}-bit+HT" if self.hadamard else f"{self.bits}-bit"


FP32 = GradPath()


@dataclass(frozen=True)
class BackwardStrategy:
    kind: StrategyKind
    grad_x: GradPath = FP32
    grad_w: GradPath = FP32
    block_size: int = Config.BLOCK_SIZE
    basis_indices: tuple = None
    rounding: str = Config.ROUNDING
    acbp: bool = True
    per_channel_gw: bool = False
    per_row_gx: bool = Config.PER_ROW_GX
    cache_weight_ht: bool = False
    pad_short_axes: bool = Config.PAD_SHORT_AXES

    def __post_init__(self):
        n = self.block_size
        if n < 2 or n & (n - 1):
            raise ParameterError(f"block size must be a power of two >= 2, got {n}")
        for path in (self.grad_x, self.grad_w):
            if path.rank is not None and path.rank > n:
                raise ParameterError(f"rank {path.rank} exceeds block size {n}")
        if self.rounding not in ("pseudo", "stochastic"):
            raise ParameterError(f"unknown rounding mode {self.rounding!r}")

    @classmethod
    def vanilla(cls):
        return cls(StrategyKind.VANILLA)

    @classmethod
    def naive(cls, bits=Config.BITS_GX, **options):
        path = GradPath(bits=bits)
        return cls(StrategyKind.NAIVE, path, path, **options)

    @classmethod
    def hq(cls, bits_gx=Config.BITS_GX, bits_gw=Config.BITS_GX, **options):
        return cls(
            StrategyKind.HQ,
            GradPath(bits=bits_gx, hadamard=True),
            GradPath(bits=bits_gw, hadamard=True),
            **options,
        )

    @classmethod
    def lbp_wht(cls, rank=Config.RANK, block_size=Config.BLOCK_SIZE, **options):
        path = GradPath(rank=rank)
        return cls(StrategyKind.LBP_WHT, path, path, block_size=block_size, **options)

    @classmethod
    def hlq(cls, rank=Config.RANK, block_size=Config.BLOCK_SIZE,
            bits_gx=Config.BITS_GX, bits_gw=Config.BITS_GW, **options):
        return cls(
            StrategyKind.HLQ,
            GradPath(bits=bits_gx, hadamard=True),
            GradPath(bits=bits_gw, rank=rank),
            block_size=block_size,
            **options,
        )

    @classmethod
    def custom(cls, grad_x, grad_w, **options):
        return cls(StrategyKind.CUSTOM, grad_x, grad_w, **options)

    @classmethod
    def from_name(cls, name, bits_gx=Config.BITS_GX, bits_gw=Config.BITS_GW,
                  rank=Config.RANK, block_size=Config.BLOCK_SIZE, **options):
        key = name.strip().lower().replace("_", "-")
        if key == StrategyKind.VANILLA.value:
            return cls.vanilla()
        if key == StrategyKind.NAIVE.value:
            return cls.naive(bits_gx, block_size=block_size, **options)
        if key == StrategyKind.HQ.value:
            return cls.hq(bits_gx, bits_gw, block_size=block_size, **options)
        if key == StrategyKind.LBP_WHT.value:
            return cls.lbp_wht(rank, block_size, **options)
        if key == StrategyKind.HLQ.value:
            return cls.hlq(rank, block_size, bits_gx, bits_gw, **options)
        raise ParameterError(f"unknown strategy {name!r}")

    @property
    def name(self):
        return self.kind.value

    @property
    def quantized(self):
        return self.grad_x.quantized or self.grad_w.quantized

    @property
    def stores_acbp(self):
        """Forward keeps only the projected, quantized activation."""
        return self.acbp and self.grad_w.low_rank and self.grad_w.quantized

    def with_bits(self, bits):
        """Same strategy with every active quantizer switched to `bits`."""
        def swap(path):
            return replace(path, bits=bits) if path.quantized else path
        return replace(self, grad_x=swap(self.grad_x), grad_w=swap(self.grad_w))

    def without_quantization(self):
        return replace(
            self,
            grad_x=replace(self.grad_x, bits=None),
            grad_w=replace(self.grad_w, bits=None),
        )

    def at_full_rank(self):
        return replace(
            self,
            grad_x=replace(self.grad_x, rank=None),
            grad_w=replace(self.grad_w, rank=None),
        )

    def with_bases(self, basis_indices):
        return replace(self, basis_indices=tuple(basis_indices))

    def describe(self):
        return {
            "strategy": self.name,
            "grad_x": self.grad_x.label,
            "grad_w": self.grad_w.label,
            "bits_gx": self.grad_x.bits,
            "bits_gw": self.grad_w.bits,
            "rank_gx": self.grad_x.rank,
            "rank_gw": self.grad_w.rank,
            "block_size": self.block_size,
            "rounding": self.rounding,
            "acbp": self.stores_acbp,
            "per_row_gx": self.per_row_gx,
        }


@dataclass(frozen=True)
class GradPair:
    g_x: Tensor
    g_w: Tensor


@dataclass(frozen=True)
class ACBPActivation:
    """Projected, quantized input activation kept from forward for the g_w backward.

    `quantized` has the layout of x (B, L, I) with the plan's axis shrunk to
    num_blocks * rank; `original_shape` is the unpadded x shape.
    """

    quantized: QuantizedTensor
    plan: HadamardPlan
    original_shape: tuple = field(default=())

    @property
    def bits(self):
        return self.quantized.bits

    @property
    def stored_shape(self):
        return self.quantized.shape

    @property
    def payload_bytes(self):
        return -(-self.quantized.payload.size * self.bits // 8)

    @property
    def original_bytes(self):
        count = 1
        for extent in self.original_shape:
            count *= extent
        return 4 * count

    def as_matrix(self):
        """Payload flattened to (rows, I) for the integer GEMM."""
        return self.quantized.reshape((-1, self.quantized.shape[-1]))
