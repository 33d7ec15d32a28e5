from dataclasses import asdict, dataclass, field

from hlq.errors.handlers import ParameterError

OVERHEAD_KEYS = ("gx", "gw", "dequant")


@dataclass
class GemmCost:
    name: str
    macs: int
    bits_a: int
    bits_b: int

    @property
    def bops(self):
        return self.macs * self.bits_a * self.bits_b


@dataclass
class LayerCost:
    """Per-layer FLOPs, bit-operations and storage for one strategy."""

    name: str
    B: int
    L: int
    I: int
    O: int
    strategy: str
    vanilla_flops: int = 0
    gemms: list = field(default_factory=list)
    overhead: dict = field(default_factory=lambda: dict.fromkeys(OVERHEAD_KEYS, 0))
    overhead_op_bits: int = 32
    forward_bops: int = 0
    activation_bytes: int = 0
    activation_overhead_bytes: int = 0
    weight_bytes: int = 0
    grad_bytes: int = 0

    @property
    def gemm_flops(self):
        return sum(2 * g.macs for g in self.gemms)

    @property
    def mac_count(self):
        return sum(g.macs for g in self.gemms)

    @property
    def flops_overhead(self):
        return sum(self.overhead.values())

    @property
    def gemm_bops(self):
        return sum(g.bops for g in self.gemms)

    @property
    def backward_bops(self):
        return self.gemm_bops + self.flops_overhead * self.overhead_op_bits

    @property
    def total_bytes(self):
        return self.activation_bytes + self.activation_overhead_bytes + self.weight_bytes + self.grad_bytes

    def to_row(self):
        return {
            "name": self.name,
            "B": self.B,
            "L": self.L,
            "I": self.I,
            "O": self.O,
            "strategy": self.strategy,
            "vanilla_flops": self.vanilla_flops,
            "gemm_flops": self.gemm_flops,
            "gx_overhead": self.overhead["gx"],
            "gw_overhead": self.overhead["gw"],
            "dequant_overhead": self.overhead["dequant"],
            "flops_overhead": self.flops_overhead,
            "overhead_ratio": self.flops_overhead / self.vanilla_flops if self.vanilla_flops else 0.0,
            "mac_count": self.mac_count,
            "gemm_bops": self.gemm_bops,
            "backward_bops": self.backward_bops,
            "forward_bops": self.forward_bops,
            "activation_bytes": self.activation_bytes,
            "activation_overhead_bytes": self.activation_overhead_bytes,
            "weight_bytes": self.weight_bytes,
            "grad_bytes": self.grad_bytes,
        }


@dataclass
class CostReport:
    strategy: str
    layers: list = field(default_factory=list)
    baseline_bytes: int = 0

    def _total(self, attr):
        return sum(getattr(layer, attr) for layer in self.layers)

    @property
    def flops_overhead(self):
        return self._total("flops_overhead")

    @property
    def vanilla_flops(self):
        return self._total("vanilla_flops")

    @property
    def mac_count(self):
        return self._total("mac_count")

    @property
    def backward_bops(self):
        return self._total("backward_bops")

    @property
    def forward_bops(self):
        return self._total("forward_bops")

    @property
    def activation_bytes(self):
        return self._total("activation_bytes")

    @property
    def activation_overhead_bytes(self):
        return self._total("activation_overhead_bytes")

    @property
    def weight_bytes(self):
        return self._total("weight_bytes")

    @property
    def grad_bytes(self):
        return self._total("grad_bytes")

    @property
    def total_bytes(self):
        return self._total("total_bytes")

    @property
    def memory_reduction_pct(self):
        if not self.baseline_bytes:
            return 0.0
        return 100.0 * (1.0 - self.total_bytes / self.baseline_bytes)

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "totals": {
                "vanilla_flops": self.vanilla_flops,
                "flops_overhead": self.flops_overhead,
                "mac_count": self.mac_count,
                "backward_bops": self.backward_bops,
                "forward_bops": self.forward_bops,
                "activation_bytes": self.activation_bytes,
                "activation_overhead_bytes": self.activation_overhead_bytes,
                "weight_bytes": self.weight_bytes,
                "grad_bytes": self.grad_bytes,
                "total_bytes": self.total_bytes,
                "baseline_bytes": self.baseline_bytes,
                "memory_reduction_pct": self.memory_reduction_pct,
            },
            "layers": [layer.to_row() for layer in self.layers],
        }


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    strategy: str
    bits_gx: int = None
    bits_gw: int = None
    wall_time: float = 0.0
    rss_mb: float = 0.0

    def to_record(self, include_timing=False):
        record = asdict(self)
        if not include_timing:
            record.pop("wall_time")
            record.pop("rss_mb")
        return record


@dataclass
class MetricsHistory:
    epochs: list = field(default_factory=list)

    def append(self, metrics):
        if self.epochs and metrics.epoch <= self.epochs[-1].epoch:
            raise ParameterError(f"epoch {metrics.epoch} does not follow {self.epochs[-1].epoch}")
        for value in (metrics.train_accuracy, metrics.val_accuracy):
            if not 0.0 <= value <= 100.0:
                raise ParameterError(f"accuracy {value} outside [0, 100]")
        self.epochs.append(metrics)

    @property
    def final(self):
        return self.epochs[-1] if self.epochs else None

    def to_records(self, include_timing=False):
        return [m.to_record(include_timing) for m in self.epochs]

    def __len__(self):
        return len(self.epochs)
